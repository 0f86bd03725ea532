//! Token reordering for video sequences.
//!
//! A video latent arrives frame by frame in raster order, so the tokens of
//! a small spatial neighbourhood are scattered `width` apart in the flat
//! sequence. Block-sparse attention wants the opposite: tokens that should
//! share an attention block must sit next to each other. The plan built
//! here keeps frames in temporal order but regroups each frame into
//! `patch x patch` tiles, laid out row-major within the frame and
//! row-major within each tile. With `patch = 8` one tile is exactly 64
//! tokens — one attention block per tile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a flattened video: `frames * height * width` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoLayout {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the square spatial tile tokens are regrouped into.
    pub patch: usize,
}

impl VideoLayout {
    pub fn new(frames: usize, height: usize, width: usize, patch: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || patch == 0 {
            return Err(Error::Layout(format!(
                "layout extents must be positive, got {frames}x{height}x{width}, patch {patch}"
            )));
        }
        if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::Layout(format!(
                "frame {height}x{width} is not divisible into {patch}x{patch} tiles"
            )));
        }
        Ok(Self { frames, height, width, patch })
    }

    /// Total number of tokens in the flattened sequence.
    pub fn seq_len(&self) -> usize {
        self.frames * self.height * self.width
    }

    /// Tokens per spatial tile (`patch * patch`).
    pub fn tokens_per_tile(&self) -> usize {
        self.patch * self.patch
    }

    /// Tile grid as `(frames, tile_rows, tile_cols)`.
    pub fn tile_grid(&self) -> (usize, usize, usize) {
        (self.frames, self.height / self.patch, self.width / self.patch)
    }
}

/// A fixed permutation of token rows: `forward[i]` is the new position of
/// source token `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReorderPlan {
    pub layout: VideoLayout,
    pub forward: Vec<u32>,
}

/// Build the raster-to-tile permutation for `layout`. Infallible once the
/// layout itself has been validated.
pub fn build_reorder_plan(layout: &VideoLayout) -> ReorderPlan {
    let (frames, h, w, p) = (layout.frames, layout.height, layout.width, layout.patch);
    let tiles_per_row = w / p;
    let per_tile = p * p;
    let per_frame = h * w;
    let mut forward = vec![0u32; layout.seq_len()];
    for t in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let src = t * per_frame + y * w + x;
                let tile = (y / p) * tiles_per_row + x / p;
                let within = (y % p) * p + (x % p);
                let dst = t * per_frame + tile * per_tile + within;
                forward[src] = dst as u32;
            }
        }
    }
    ReorderPlan { layout: *layout, forward }
}

impl ReorderPlan {
    /// Inverse permutation: `inverse[new] = old`.
    pub fn inverse(&self) -> Vec<u32> {
        let mut inv = vec![0u32; self.forward.len()];
        for (old, &new) in self.forward.iter().enumerate() {
            inv[new as usize] = old as u32;
        }
        inv
    }

    /// JSON form with the explicit forward index array.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: ReorderPlan =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("reorder plan: {e}")))?;
        plan.check()?;
        Ok(plan)
    }

    /// Verify the stored indices form a permutation of the layout's tokens.
    pub fn check(&self) -> Result<()> {
        let s = self.layout.seq_len();
        if self.forward.len() != s {
            return Err(Error::Layout(format!(
                "plan covers {} tokens but the layout has {s}",
                self.forward.len()
            )));
        }
        let mut seen = vec![false; s];
        for &f in &self.forward {
            let f = f as usize;
            if f >= s || seen[f] {
                return Err(Error::Layout(format!(
                    "forward indices are not a permutation (index {f})"
                )));
            }
            seen[f] = true;
        }
        Ok(())
    }
}

fn gather_rows(x: &Tensor, map: &[u32]) -> Result<Tensor> {
    let (batch, s, d) = match x.rank() {
        2 => (1, x.shape()[0], x.shape()[1]),
        3 => (x.shape()[0], x.shape()[1], x.shape()[2]),
        _ => {
            return Err(Error::Dimension(format!(
                "reorder expects [seq, dim] or [heads, seq, dim], got {:?}",
                x.shape()
            )))
        }
    };
    if s != map.len() {
        return Err(Error::Dimension(format!(
            "tensor has {s} token rows but the plan covers {}",
            map.len()
        )));
    }
    let mut out = Tensor::zeros(x.shape())?;
    for b in 0..batch {
        let src = &x.data()[b * s * d..(b + 1) * s * d];
        let dst = &mut out.data_mut()[b * s * d..(b + 1) * s * d];
        for (i, &f) in map.iter().enumerate() {
            let f = f as usize;
            dst[f * d..(f + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
    }
    Ok(out)
}

/// Move every token row of `x` to its tile-ordered position.
/// Accepts `[seq, dim]` or `[heads, seq, dim]`.
pub fn apply_reorder(x: &Tensor, plan: &ReorderPlan) -> Result<Tensor> {
    gather_rows(x, &plan.forward)
}

/// Undo [`apply_reorder`], restoring raster order.
pub fn invert_reorder(x: &Tensor, plan: &ReorderPlan) -> Result<Tensor> {
    gather_rows(x, &plan.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn rejects_unaligned_frames() {
        assert_eq!(VideoLayout::new(1, 15, 16, 8).unwrap_err().kind(), "layout");
        assert_eq!(VideoLayout::new(1, 16, 12, 8).unwrap_err().kind(), "layout");
        assert_eq!(VideoLayout::new(0, 16, 16, 8).unwrap_err().kind(), "layout");
        assert!(VideoLayout::new(3, 16, 24, 8).is_ok());
    }

    #[test]
    fn single_frame_tile_positions() {
        // 16x16 frame in 8x8 tiles: the raster row crosses into the second
        // tile at x = 8, which lands at flat position 64 (start of tile 1).
        let layout = VideoLayout::new(1, 16, 16, 8).unwrap();
        let plan = build_reorder_plan(&layout);
        for x in 0..8 {
            assert_eq!(plan.forward[x], x as u32);
        }
        assert_eq!(plan.forward[8], 64);
        // Second raster row continues tile 0 at its second in-tile row.
        assert_eq!(plan.forward[16], 8);
        // Row 8 starts the third tile (tile row 1).
        assert_eq!(plan.forward[8 * 16], 128);
    }

    #[test]
    fn frames_stay_in_temporal_order() {
        let layout = VideoLayout::new(3, 8, 16, 8).unwrap();
        let plan = build_reorder_plan(&layout);
        let per_frame = 8 * 16;
        for (i, &f) in plan.forward.iter().enumerate() {
            assert_eq!(i / per_frame, f as usize / per_frame);
        }
    }

    #[test]
    fn tiles_occupy_contiguous_blocks() {
        let layout = VideoLayout::new(2, 16, 24, 8).unwrap();
        let plan = build_reorder_plan(&layout);
        let (_, rows, cols) = layout.tile_grid();
        let per_tile = layout.tokens_per_tile();
        let per_frame = layout.height * layout.width;
        // Collect destinations per tile and check each fills one block.
        for t in 0..layout.frames {
            for tr in 0..rows {
                for tc in 0..cols {
                    let mut dsts: Vec<u32> = Vec::new();
                    for dy in 0..layout.patch {
                        for dx in 0..layout.patch {
                            let y = tr * layout.patch + dy;
                            let x = tc * layout.patch + dx;
                            dsts.push(plan.forward[t * per_frame + y * layout.width + x]);
                        }
                    }
                    dsts.sort_unstable();
                    let base = (t * per_frame + (tr * cols + tc) * per_tile) as u32;
                    let expect: Vec<u32> = (base..base + per_tile as u32).collect();
                    assert_eq!(dsts, expect);
                }
            }
        }
    }

    #[test]
    fn apply_then_invert_round_trips() {
        let layout = VideoLayout::new(2, 8, 8, 4).unwrap();
        let plan = build_reorder_plan(&layout);
        let mut rng = Rng::new(9);
        let x = rng.normal_tensor(&[2, layout.seq_len(), 3]).unwrap();
        let back = invert_reorder(&apply_reorder(&x, &plan).unwrap(), &plan).unwrap();
        assert_eq!(x.data(), back.data());
    }

    #[test]
    fn json_round_trips_and_validates() {
        let layout = VideoLayout::new(1, 8, 8, 4).unwrap();
        let plan = build_reorder_plan(&layout);
        let text = plan.to_json();
        assert!(text.contains("\"forward\""));
        let parsed = ReorderPlan::from_json(&text).unwrap();
        assert_eq!(parsed, plan);
        // A corrupted plan with a repeated index is rejected.
        let mut bad = plan.clone();
        bad.forward[1] = bad.forward[0];
        assert_eq!(
            ReorderPlan::from_json(&bad.to_json()).unwrap_err().kind(),
            "layout"
        );
    }

    #[test]
    fn row_count_mismatch_is_rejected() {
        let layout = VideoLayout::new(1, 8, 8, 4).unwrap();
        let plan = build_reorder_plan(&layout);
        let x = Tensor::zeros(&[10, 3]).unwrap();
        assert_eq!(apply_reorder(&x, &plan).unwrap_err().kind(), "dimension");
    }

    proptest! {
        #[test]
        fn forward_is_always_a_permutation(
            frames in 1usize..4,
            tile_rows in 1usize..4,
            tile_cols in 1usize..4,
            patch in 1usize..6,
        ) {
            let layout = VideoLayout::new(
                frames, tile_rows * patch, tile_cols * patch, patch,
            ).unwrap();
            let plan = build_reorder_plan(&layout);
            prop_assert!(plan.check().is_ok());
        }

        #[test]
        fn round_trip_preserves_rows(seed in 0u64..1000) {
            let layout = VideoLayout::new(2, 4, 8, 2).unwrap();
            let plan = build_reorder_plan(&layout);
            let mut rng = Rng::new(seed);
            let x = rng.normal_tensor(&[layout.seq_len(), 2]).unwrap();
            let back = invert_reorder(&apply_reorder(&x, &plan).unwrap(), &plan).unwrap();
            prop_assert_eq!(x.data(), back.data());
        }
    }
}
