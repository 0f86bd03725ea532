//! Block-level attention masks and the adaptive mask builder.
//!
//! The builder works on a coarse grid: queries and keys are mean-pooled
//! block-wise, a low-resolution softmax map estimates how much probability
//! mass each (query block, key block) pair would carry, and a per-row CDF
//! cut keeps the smallest set of key blocks covering the requested mass.
//! An optional sliding-tile window — a fixed local neighbourhood in
//! (frame, tile row, tile column) space — can be OR-ed in so nearby tokens
//! are never dropped, whatever the data looks like.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::reorder::VideoLayout;
use crate::tensor::{dot, softmax_row_into, Tensor};

/// Default edge of one attention block, matching an 8x8 reorder tile.
pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// Partition of a query/key sequence pair into fixed-size token blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub block_size: usize,
    pub num_q_blocks: usize,
    pub num_k_blocks: usize,
}

impl BlockGrid {
    pub fn new(block_size: usize, num_q_blocks: usize, num_k_blocks: usize) -> Result<Self> {
        if block_size == 0 || num_q_blocks == 0 || num_k_blocks == 0 {
            return Err(Error::Parameter(format!(
                "block grid needs positive sizes, got block {block_size}, {num_q_blocks}x{num_k_blocks} blocks"
            )));
        }
        Ok(Self { block_size, num_q_blocks, num_k_blocks })
    }
}

/// Per-head boolean matrix over block pairs: `true` means the query block
/// may read the key block. Every (head, query block) row keeps at least
/// one key block, so a softmax over the allowed set is always defined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    grid: BlockGrid,
    heads: usize,
    bits: Vec<bool>,
}

impl BlockMask {
    /// Mask allowing every block pair.
    pub fn all_allowed(grid: BlockGrid, heads: usize) -> Self {
        let bits = vec![true; heads * grid.num_q_blocks * grid.num_k_blocks];
        Self { grid, heads, bits }
    }

    /// Build from raw row-major bits (`head`, then query block, then key
    /// block). Rejects masks that would starve a query row of keys.
    pub fn from_bits(grid: BlockGrid, heads: usize, bits: Vec<bool>) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Parameter("mask needs at least one head".into()));
        }
        let expect = heads * grid.num_q_blocks * grid.num_k_blocks;
        if bits.len() != expect {
            return Err(Error::Dimension(format!(
                "mask has {} bits but the grid needs {expect}",
                bits.len()
            )));
        }
        let mask = Self { grid, heads, bits };
        for h in 0..heads {
            for qb in 0..grid.num_q_blocks {
                if !mask.row(h, qb).iter().any(|&b| b) {
                    return Err(Error::Contract(format!(
                        "query block {qb} of head {h} has no allowed key blocks"
                    )));
                }
            }
        }
        Ok(mask)
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn allowed(&self, head: usize, qb: usize, kb: usize) -> bool {
        self.bits[(head * self.grid.num_q_blocks + qb) * self.grid.num_k_blocks + kb]
    }

    pub(crate) fn row(&self, head: usize, qb: usize) -> &[bool] {
        let w = self.grid.num_k_blocks;
        let start = (head * self.grid.num_q_blocks + qb) * w;
        &self.bits[start..start + w]
    }

    /// Check the mask matches `heads` attention heads over query length
    /// `sq` and key length `sk`.
    pub fn check_covers(&self, heads: usize, sq: usize, sk: usize) -> Result<()> {
        if self.heads != heads {
            return Err(Error::Dimension(format!(
                "mask has {} heads but the inputs have {heads}",
                self.heads
            )));
        }
        let b = self.grid.block_size;
        if self.grid.num_q_blocks * b != sq || self.grid.num_k_blocks * b != sk {
            return Err(Error::Dimension(format!(
                "mask covers {}x{} tokens (block {b}) but the inputs are {sq}x{sk}",
                self.grid.num_q_blocks * b,
                self.grid.num_k_blocks * b,
            )));
        }
        Ok(())
    }

    /// Number of allowed block pairs across all heads.
    pub fn allowed_count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    /// Fraction of block pairs that are dropped, over all heads.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.allowed_count() as f64 / self.bits.len() as f64
    }

    /// Dropped fraction per head.
    pub fn per_head_sparsity(&self) -> Vec<f64> {
        let per = self.grid.num_q_blocks * self.grid.num_k_blocks;
        (0..self.heads)
            .map(|h| {
                let kept = self.bits[h * per..(h + 1) * per]
                    .iter()
                    .filter(|&&b| b)
                    .count();
                1.0 - kept as f64 / per as f64
            })
            .collect()
    }

    /// Replicate a single-head mask across `heads` heads.
    pub fn broadcast_heads(&self, heads: usize) -> Result<Self> {
        if self.heads != 1 {
            return Err(Error::Dimension(format!(
                "only a 1-head mask can be broadcast, this one has {}",
                self.heads
            )));
        }
        if heads == 0 {
            return Err(Error::Parameter("cannot broadcast to zero heads".into()));
        }
        let mut bits = Vec::with_capacity(heads * self.bits.len());
        for _ in 0..heads {
            bits.extend_from_slice(&self.bits);
        }
        Ok(Self { grid: self.grid, heads, bits })
    }

    /// Pairwise OR of two masks over the same grid and head count.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.grid != other.grid || self.heads != other.heads {
            return Err(Error::Dimension(format!(
                "cannot union masks over different grids ({:?}/{} vs {:?}/{})",
                self.grid, self.heads, other.grid, other.heads
            )));
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(Self { grid: self.grid, heads: self.heads, bits })
    }

    /// Serialize as a compact bitset: `heads`, `num_q_blocks`,
    /// `num_k_blocks` as little-endian u64, then the row-major bits packed
    /// eight per byte, least significant bit first.
    pub fn write_bitset<W: Write>(&self, mut w: W) -> Result<()> {
        for n in [self.heads, self.grid.num_q_blocks, self.grid.num_k_blocks] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &bit) in self.bits.iter().enumerate() {
            if bit {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&packed)?;
        Ok(())
    }

    /// Read a mask written by [`write_bitset`]. The block size is not part
    /// of the container, so the caller supplies it.
    pub fn read_bitset<R: Read>(mut r: R, block_size: usize) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut word)?;
            let n = u64::from_le_bytes(word);
            *d = usize::try_from(n)
                .map_err(|_| Error::Parse(format!("bitset dimension {n} overflows this platform")))?;
        }
        let [heads, bq, bk] = dims;
        let grid = BlockGrid::new(block_size, bq, bk)?;
        let total = heads
            .checked_mul(bq)
            .and_then(|n| n.checked_mul(bk))
            .ok_or_else(|| Error::Parse("bitset dimensions overflow".into()))?;
        let mut packed = vec![0u8; total.div_ceil(8)];
        r.read_exact(&mut packed)?;
        let bits = (0..total)
            .map(|i| packed[i / 8] >> (i % 8) & 1 == 1)
            .collect();
        Self::from_bits(grid, heads, bits)
    }

    /// Render one head as an ASCII PGM image: allowed blocks are white,
    /// dropped blocks black. Handy for eyeballing mask structure.
    pub fn to_pgm(&self, head: usize) -> Result<String> {
        if head >= self.heads {
            return Err(Error::Parameter(format!(
                "head {head} out of range for a {}-head mask",
                self.heads
            )));
        }
        let (bq, bk) = (self.grid.num_q_blocks, self.grid.num_k_blocks);
        let mut out = format!("P2\n{bk} {bq}\n255\n");
        for qb in 0..bq {
            let row: Vec<&str> = self
                .row(head, qb)
                .iter()
                .map(|&b| if b { "255" } else { "0" })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        Ok(out)
    }
}

/// Mean-pool token rows block-wise: `[heads, seq, dim]` becomes
/// `[heads, seq / block, dim]`.
pub fn pool_sequence(x: &Tensor, block: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Dimension(format!(
            "pooling expects [heads, seq, dim], got {:?}",
            x.shape()
        )));
    }
    let (h, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if block == 0 || s % block != 0 {
        return Err(Error::Dimension(format!(
            "sequence length {s} is not divisible into blocks of {block}"
        )));
    }
    let nb = s / block;
    let mut out = Tensor::zeros(&[h, nb, d])?;
    for head in 0..h {
        for b in 0..nb {
            for c in 0..d {
                let mut acc = 0.0f64;
                for i in 0..block {
                    acc += f64::from(x.data()[(head * s + b * block + i) * d + c]);
                }
                out.data_mut()[(head * nb + b) * d + c] = (acc / block as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Row-softmax of the pooled score matrix: for each head, a
/// `[num_q_blocks, num_k_blocks]` map whose rows sum to one.
pub fn lowres_map(pooled_q: &Tensor, pooled_k: &Tensor, scale: f32) -> Result<Tensor> {
    for (name, t) in [("pooled q", pooled_q), ("pooled k", pooled_k)] {
        if t.rank() != 3 {
            return Err(Error::Dimension(format!(
                "{name} must be [heads, blocks, dim], got {:?}",
                t.shape()
            )));
        }
    }
    let (h, bq, d) = (pooled_q.shape()[0], pooled_q.shape()[1], pooled_q.shape()[2]);
    let bk = pooled_k.shape()[1];
    if pooled_k.shape()[0] != h || pooled_k.shape()[2] != d {
        return Err(Error::Dimension(format!(
            "pooled q {:?} and pooled k {:?} disagree",
            pooled_q.shape(),
            pooled_k.shape()
        )));
    }
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::Parameter(format!("scale must be positive, got {scale}")));
    }
    let mut out = Tensor::zeros(&[h, bq, bk])?;
    let mut logits = vec![0.0f32; bk];
    for head in 0..h {
        for i in 0..bq {
            let q_row = &pooled_q.data()[(head * bq + i) * d..(head * bq + i + 1) * d];
            for (j, logit) in logits.iter_mut().enumerate() {
                let k_row = &pooled_k.data()[(head * bk + j) * d..(head * bk + j + 1) * d];
                *logit = dot(q_row, k_row) * scale;
            }
            let start = (head * bq + i) * bk;
            softmax_row_into(&logits, &mut out.data_mut()[start..start + bk]);
        }
    }
    Ok(out)
}

/// Keep, per row of the probability map, the smallest set of key blocks
/// whose combined mass reaches `1 - thr`; ties sort toward the lower block
/// index. `thr = 0` keeps exactly the blocks with nonzero probability.
/// Rows must be probability distributions (sum within 1e-4 of one).
pub fn cdf_threshold(map: &Tensor, thr: f64, block_size: usize) -> Result<BlockMask> {
    if !(0.0..1.0).contains(&thr) {
        return Err(Error::Parameter(format!(
            "threshold must lie in [0, 1), got {thr}"
        )));
    }
    if map.rank() != 3 {
        return Err(Error::Dimension(format!(
            "probability map must be [heads, q_blocks, k_blocks], got {:?}",
            map.shape()
        )));
    }
    let (h, bq, bk) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let grid = BlockGrid::new(block_size, bq, bk)?;
    let mut bits = vec![false; h * bq * bk];
    let mut order: Vec<usize> = Vec::with_capacity(bk);
    for head in 0..h {
        for qb in 0..bq {
            let row = &map.data()[(head * bq + qb) * bk..(head * bq + qb + 1) * bk];
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::Contract(format!(
                    "map row ({head}, {qb}) is not a probability distribution"
                )));
            }
            order.clear();
            order.extend(0..bk);
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let total: f64 = order.iter().map(|&j| f64::from(row[j])).sum();
            if (total - 1.0).abs() > 1e-4 {
                return Err(Error::Contract(format!(
                    "map row ({head}, {qb}) sums to {total}, expected 1"
                )));
            }
            let out = &mut bits[(head * bq + qb) * bk..(head * bq + qb + 1) * bk];
            if thr == 0.0 {
                for &j in &order {
                    if row[j] > 0.0 {
                        out[j] = true;
                    }
                }
                // A degenerate all-zero row cannot reach this point (its sum
                // would fail the distribution check above).
                continue;
            }
            let target = (1.0 - thr).min(total);
            let mut cum = 0.0f64;
            for &j in &order {
                cum += f64::from(row[j]);
                out[j] = true;
                if cum >= target {
                    break;
                }
            }
        }
    }
    BlockMask::from_bits(grid, h, bits)
}

/// Local-window mask over a block grid laid out as
/// `(frames, tile_rows, tile_cols)`: block pairs are allowed when their
/// coordinates differ by at most the window radius on every axis. Window
/// extents must be odd so the neighbourhood is centred.
pub fn sta_mask(
    grid: BlockGrid,
    tiles: (usize, usize, usize),
    window: (usize, usize, usize),
) -> Result<BlockMask> {
    let (bt, br, bc) = tiles;
    if bt * br * bc != grid.num_q_blocks || grid.num_q_blocks != grid.num_k_blocks {
        return Err(Error::Layout(format!(
            "tile grid {bt}x{br}x{bc} does not cover a square {}x{} block grid",
            grid.num_q_blocks, grid.num_k_blocks
        )));
    }
    for (axis, w) in [("frame", window.0), ("row", window.1), ("column", window.2)] {
        if w == 0 || w % 2 == 0 {
            return Err(Error::Parameter(format!(
                "{axis} window must be odd and positive, got {w}"
            )));
        }
    }
    let radius = ((window.0 - 1) / 2, (window.1 - 1) / 2, (window.2 - 1) / 2);
    let n = grid.num_q_blocks;
    let coord = |b: usize| (b / (br * bc), b % (br * bc) / bc, b % bc);
    let mut bits = vec![false; n * n];
    for qb in 0..n {
        let (qt, qr, qc) = coord(qb);
        for kb in 0..n {
            let (kt, kr, kc) = coord(kb);
            bits[qb * n + kb] = qt.abs_diff(kt) <= radius.0
                && qr.abs_diff(kr) <= radius.1
                && qc.abs_diff(kc) <= radius.2;
        }
    }
    BlockMask::from_bits(grid, 1, bits)
}

/// Settings for [`build_nabla_mask`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NablaConfig {
    pub block_size: usize,
    /// Probability mass the CDF cut is allowed to drop per row.
    pub thr: f64,
    /// Optional local window to union in, as (frames, rows, cols) extents.
    pub sta_window: Option<(usize, usize, usize)>,
}

impl NablaConfig {
    pub fn new(thr: f64) -> Self {
        Self { block_size: DEFAULT_BLOCK_SIZE, thr, sta_window: None }
    }

    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size;
        self
    }

    pub fn with_window(mut self, window: (usize, usize, usize)) -> Self {
        self.sta_window = Some(window);
        self
    }
}

/// Build the adaptive block mask for reordered queries and keys: pool,
/// softmax at block resolution, CDF-cut each row, and union the optional
/// local window.
pub fn build_nabla_mask(
    q: &Tensor,
    k: &Tensor,
    layout: &VideoLayout,
    cfg: &NablaConfig,
    spec: &crate::attention::AttentionSpec,
) -> Result<BlockMask> {
    for (name, t) in [("q", q), ("k", k)] {
        if t.rank() != 3 {
            return Err(Error::Dimension(format!(
                "{name} must be [heads, seq, dim], got {:?}",
                t.shape()
            )));
        }
    }
    if q.shape() != k.shape() {
        return Err(Error::Dimension(format!(
            "q {:?} and k {:?} disagree",
            q.shape(),
            k.shape()
        )));
    }
    let (h, s, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if h != spec.num_heads || d != spec.head_dim {
        return Err(Error::Dimension(format!(
            "inputs are [{h}, {s}, {d}], expected {} heads of dim {}",
            spec.num_heads, spec.head_dim
        )));
    }
    if s != layout.seq_len() {
        return Err(Error::Dimension(format!(
            "sequence length {s} does not match the layout's {} tokens",
            layout.seq_len()
        )));
    }
    let pooled_q = pool_sequence(q, cfg.block_size)?;
    let pooled_k = pool_sequence(k, cfg.block_size)?;
    let map = lowres_map(&pooled_q, &pooled_k, spec.scale)?;
    let mask = cdf_threshold(&map, cfg.thr, cfg.block_size)?;
    let Some(window) = cfg.sta_window else {
        return Ok(mask);
    };
    if cfg.block_size != layout.tokens_per_tile() {
        return Err(Error::Layout(format!(
            "local-window union needs attention blocks matching reorder tiles \
             ({} tokens), got block size {}",
            layout.tokens_per_tile(),
            cfg.block_size
        )));
    }
    let local = sta_mask(*mask.grid(), layout.tile_grid(), window)?.broadcast_heads(h)?;
    mask.union(&local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionSpec;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn grid(b: usize, q: usize, k: usize) -> BlockGrid {
        BlockGrid::new(b, q, k).unwrap()
    }

    #[test]
    fn from_bits_rejects_starved_rows() {
        let g = grid(2, 2, 2);
        let bits = vec![true, true, false, false];
        let err = BlockMask::from_bits(g, 1, bits).unwrap_err();
        assert_eq!(err.kind(), "contract");
    }

    #[test]
    fn sparsity_counts_dropped_pairs() {
        let g = grid(2, 2, 2);
        let mask = BlockMask::from_bits(g, 1, vec![true, false, true, true]).unwrap();
        assert_eq!(mask.allowed_count(), 3);
        assert!((mask.sparsity() - 0.25).abs() < 1e-12);
        assert_eq!(BlockMask::all_allowed(g, 3).sparsity(), 0.0);
    }

    #[test]
    fn pooling_averages_each_block() {
        // Rows hold their own index, so a block of 4 averages to idx + 1.5.
        let s = 8;
        let mut x = Tensor::zeros(&[1, s, 2]).unwrap();
        for i in 0..s {
            x.data_mut()[i * 2] = i as f32;
            x.data_mut()[i * 2 + 1] = -(i as f32);
        }
        let pooled = pool_sequence(&x, 4).unwrap();
        assert_eq!(pooled.shape(), &[1, 2, 2]);
        assert_eq!(pooled.data(), &[1.5, -1.5, 5.5, -5.5]);
        assert_eq!(pool_sequence(&x, 3).unwrap_err().kind(), "dimension");
    }

    #[test]
    fn lowres_rows_are_distributions() {
        let mut rng = Rng::new(2);
        let qp = rng.normal_tensor(&[2, 5, 4]).unwrap();
        let kp = rng.normal_tensor(&[2, 7, 4]).unwrap();
        let map = lowres_map(&qp, &kp, 0.5).unwrap();
        assert_eq!(map.shape(), &[2, 5, 7]);
        for head in 0..2 {
            for i in 0..5 {
                let row = &map.data()[(head * 5 + i) * 7..(head * 5 + i + 1) * 7];
                let sum: f64 = row.iter().map(|&p| f64::from(p)).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cdf_keeps_smallest_prefix() {
        let map = Tensor::new(&[1, 1, 4], vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        // Dropping 0.25 of the mass keeps blocks until 0.75 is covered:
        // 0.4 + 0.3 < 0.75, so the third block is needed too.
        let mask = cdf_threshold(&map, 0.25, 2).unwrap();
        assert_eq!(
            (0..4).map(|j| mask.allowed(0, 0, j)).collect::<Vec<_>>(),
            vec![true, true, true, false]
        );
    }

    #[test]
    fn cdf_ties_prefer_lower_index() {
        let map = Tensor::new(&[1, 1, 4], vec![0.25; 4]).unwrap();
        let mask = cdf_threshold(&map, 0.5, 2).unwrap();
        assert_eq!(
            (0..4).map(|j| mask.allowed(0, 0, j)).collect::<Vec<_>>(),
            vec![true, true, false, false]
        );
    }

    #[test]
    fn zero_threshold_keeps_exactly_the_support() {
        let map = Tensor::new(&[1, 1, 4], vec![0.5, 0.3, 0.2, 0.0]).unwrap();
        let mask = cdf_threshold(&map, 0.0, 2).unwrap();
        assert_eq!(
            (0..4).map(|j| mask.allowed(0, 0, j)).collect::<Vec<_>>(),
            vec![true, true, true, false]
        );
    }

    #[test]
    fn cdf_validates_inputs() {
        let map = Tensor::new(&[1, 1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(cdf_threshold(&map, 1.0, 2).unwrap_err().kind(), "parameter");
        assert_eq!(cdf_threshold(&map, -0.1, 2).unwrap_err().kind(), "parameter");
        let bad = Tensor::new(&[1, 1, 2], vec![0.9, 0.3]).unwrap();
        assert_eq!(cdf_threshold(&bad, 0.1, 2).unwrap_err().kind(), "contract");
    }

    #[test]
    fn window_mask_is_a_banded_matrix() {
        // 5 frames of a single tile: window 3 on the frame axis gives the
        // classic tridiagonal band.
        let g = grid(4, 5, 5);
        let mask = sta_mask(g, (5, 1, 1), (3, 1, 1)).unwrap();
        for qb in 0..5 {
            for kb in 0..5 {
                assert_eq!(mask.allowed(0, qb, kb), qb.abs_diff(kb) <= 1);
            }
        }
    }

    #[test]
    fn window_mask_validates_geometry() {
        let g = grid(4, 6, 6);
        assert_eq!(sta_mask(g, (5, 1, 1), (3, 1, 1)).unwrap_err().kind(), "layout");
        assert_eq!(
            sta_mask(g, (6, 1, 1), (2, 1, 1)).unwrap_err().kind(),
            "parameter"
        );
        let rect = grid(4, 6, 3);
        assert_eq!(sta_mask(rect, (6, 1, 1), (3, 1, 1)).unwrap_err().kind(), "layout");
    }

    #[test]
    fn union_requires_matching_shapes() {
        let a = BlockMask::all_allowed(grid(2, 2, 2), 1);
        let b = BlockMask::all_allowed(grid(2, 3, 3), 1);
        assert_eq!(a.union(&b).unwrap_err().kind(), "dimension");
        let c = BlockMask::all_allowed(grid(2, 2, 2), 2);
        assert_eq!(a.union(&c).unwrap_err().kind(), "dimension");
    }

    #[test]
    fn broadcast_replicates_the_single_head() {
        let g = grid(2, 2, 2);
        let one = BlockMask::from_bits(g, 1, vec![true, false, false, true]).unwrap();
        let three = one.broadcast_heads(3).unwrap();
        for h in 0..3 {
            assert!(three.allowed(h, 0, 0));
            assert!(!three.allowed(h, 0, 1));
        }
        assert_eq!(three.broadcast_heads(2).unwrap_err().kind(), "dimension");
    }

    #[test]
    fn bitset_bytes_are_stable() {
        let g = grid(2, 2, 3);
        let bits = vec![true, false, true, false, true, true];
        let mask = BlockMask::from_bits(g, 1, bits).unwrap();
        let mut buf = Vec::new();
        mask.write_bitset(&mut buf).unwrap();
        let mut expect = Vec::new();
        for n in [1u64, 2, 3] {
            expect.extend_from_slice(&n.to_le_bytes());
        }
        expect.push(0b0011_0101);
        assert_eq!(buf, expect);
        let back = BlockMask::read_bitset(buf.as_slice(), 2).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn pgm_renders_allowed_blocks_white() {
        let g = grid(2, 2, 2);
        let mask = BlockMask::from_bits(g, 1, vec![true, false, false, true]).unwrap();
        assert_eq!(mask.to_pgm(0).unwrap(), "P2\n2 2\n255\n255 0\n0 255\n");
        assert_eq!(mask.to_pgm(1).unwrap_err().kind(), "parameter");
    }

    #[test]
    fn block_diagonal_inputs_produce_a_diagonal_mask() {
        // Each block's tokens point along their own one-hot axis, strongly
        // enough that the pooled softmax puts 75% of each row's mass on the
        // diagonal. Dropping up to half the mass then keeps only it.
        let (blocks, block, d) = (4, 4, 8);
        let spec = AttentionSpec::new(1, d).unwrap();
        let alpha = (3.0f64 * 3.0).ln() / f64::from(spec.scale);
        let alpha = (alpha.sqrt()) as f32;
        let mut q = Tensor::zeros(&[1, blocks * block, d]).unwrap();
        for b in 0..blocks {
            for i in 0..block {
                q.data_mut()[((b * block) + i) * d + b] = alpha;
            }
        }
        let layout = VideoLayout::new(1, 4, 4, 2).unwrap();
        let cfg = NablaConfig { block_size: block, thr: 0.5, sta_window: None };
        let mask = build_nabla_mask(&q, &q, &layout, &cfg, &spec).unwrap();
        // Cross-check the pooled map by brute force before trusting it.
        let pooled = pool_sequence(&q, block).unwrap();
        for i in 0..blocks {
            let mut logits = vec![0.0f64; blocks];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut l = 0.0f64;
                for c in 0..d {
                    l += f64::from(pooled.data()[i * d + c]) * f64::from(pooled.data()[j * d + c]);
                }
                *logit = l * f64::from(spec.scale);
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
            let diag = (logits[i] - m).exp() / z;
            assert!(diag > 0.5, "diagonal mass {diag} too small for the cut");
        }
        for qb in 0..blocks {
            for kb in 0..blocks {
                assert_eq!(mask.allowed(0, qb, kb), qb == kb);
            }
        }
    }

    #[test]
    fn window_union_restores_the_neighbourhood() {
        let layout = VideoLayout::new(4, 2, 2, 2).unwrap();
        let s = layout.seq_len();
        let block = layout.tokens_per_tile();
        let spec = AttentionSpec::new(1, 4).unwrap();
        let mut rng = Rng::new(7);
        let q = rng.normal_tensor(&[1, s, 4]).unwrap();
        let k = rng.normal_tensor(&[1, s, 4]).unwrap();
        let bare = NablaConfig { block_size: block, thr: 0.9, sta_window: None };
        let with_win =
            NablaConfig { block_size: block, thr: 0.9, sta_window: Some((3, 1, 1)) };
        let adaptive = build_nabla_mask(&q, &k, &layout, &bare, &spec).unwrap();
        let combined = build_nabla_mask(&q, &k, &layout, &with_win, &spec).unwrap();
        let window = sta_mask(*adaptive.grid(), layout.tile_grid(), (3, 1, 1)).unwrap();
        for qb in 0..4 {
            for kb in 0..4 {
                assert_eq!(
                    combined.allowed(0, qb, kb),
                    adaptive.allowed(0, qb, kb) || window.allowed(0, qb, kb)
                );
            }
        }
    }

    #[test]
    fn window_union_demands_matching_block_size() {
        let layout = VideoLayout::new(2, 4, 4, 2).unwrap();
        let spec = AttentionSpec::new(1, 4).unwrap();
        let q = Tensor::full(&[1, layout.seq_len(), 4], 0.1).unwrap();
        let cfg = NablaConfig { block_size: 8, thr: 0.5, sta_window: Some((1, 1, 1)) };
        let err = build_nabla_mask(&q, &q, &layout, &cfg, &spec).unwrap_err();
        assert_eq!(err.kind(), "layout");
    }

    proptest! {
        #[test]
        fn union_allows_iff_either_allows(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let g = grid(2, 3, 4);
            let gen = |rng: &mut Rng| {
                let mut bits = vec![false; 2 * 3 * 4];
                for qb in 0..3 {
                    for h in 0..2 {
                        let forced = rng.range(4);
                        for kb in 0..4 {
                            bits[(h * 3 + qb) * 4 + kb] = kb == forced || rng.uniform() < 0.4;
                        }
                    }
                }
                BlockMask::from_bits(g, 2, bits).unwrap()
            };
            let a = gen(&mut rng);
            let b = gen(&mut rng);
            let u = a.union(&b).unwrap();
            prop_assert_eq!(u.clone(), b.union(&a).unwrap());
            for h in 0..2 {
                for qb in 0..3 {
                    for kb in 0..4 {
                        prop_assert_eq!(
                            u.allowed(h, qb, kb),
                            a.allowed(h, qb, kb) || b.allowed(h, qb, kb)
                        );
                    }
                }
            }
        }

        #[test]
        fn tighter_thresholds_keep_subsets(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let qp = rng.normal_tensor(&[1, 6, 4]).unwrap();
            let kp = rng.normal_tensor(&[1, 6, 4]).unwrap();
            let map = lowres_map(&qp, &kp, 0.5).unwrap();
            let loose = cdf_threshold(&map, 0.2, 4).unwrap();
            let tight = cdf_threshold(&map, 0.6, 4).unwrap();
            for qb in 0..6 {
                for kb in 0..6 {
                    if tight.allowed(0, qb, kb) {
                        prop_assert!(loose.allowed(0, qb, kb));
                    }
                }
            }
        }

        #[test]
        fn bitset_round_trips(seed in 0u64..300) {
            let mut rng = Rng::new(seed);
            let g = grid(3, 4, 5);
            let mut bits = vec![false; 2 * 4 * 5];
            for h in 0..2 {
                for qb in 0..4 {
                    let forced = rng.range(5);
                    for kb in 0..5 {
                        bits[(h * 4 + qb) * 5 + kb] = kb == forced || rng.uniform() < 0.3;
                    }
                }
            }
            let mask = BlockMask::from_bits(g, 2, bits).unwrap();
            let mut buf = Vec::new();
            mask.write_bitset(&mut buf).unwrap();
            prop_assert_eq!(BlockMask::read_bitset(buf.as_slice(), 3).unwrap(), mask);
        }
    }
}
