//! Dense multi-head attention, used as the ground-truth reference.
//!
//! Both entry points share one code path: [`dense_attention`] is
//! [`dense_attention_masked`] with an all-allowed mask, so the masked
//! variant is exercised by every dense call. Logits are f32, but
//! exponentials and the probability-weighted sums run in f64 with a fixed
//! left-to-right order; outputs are rounded to f32 at the end. That keeps
//! the reference numerically tight enough to compare the sparse kernel
//! against at small tolerances even for long sequences.

use crate::error::{Error, Result};
use crate::mask::BlockMask;
use crate::tensor::{dot, Tensor};
use crate::threads::for_each_head;

/// Shape and scaling parameters shared by every attention call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSpec {
    pub num_heads: usize,
    pub head_dim: usize,
    /// Multiplier applied to every query–key dot product.
    pub scale: f32,
}

impl AttentionSpec {
    /// Spec with the conventional `1/sqrt(head_dim)` scale.
    pub fn new(num_heads: usize, head_dim: usize) -> Result<Self> {
        Self::with_scale(num_heads, head_dim, 1.0 / (head_dim as f32).sqrt())
    }

    /// Spec with an explicit scale (must be finite and positive).
    pub fn with_scale(num_heads: usize, head_dim: usize, scale: f32) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::Parameter(format!(
                "attention spec needs positive head count and head dim, got {num_heads} and {head_dim}"
            )));
        }
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::Parameter(format!(
                "attention scale must be finite and positive, got {scale}"
            )));
        }
        Ok(Self { num_heads, head_dim, scale })
    }
}

/// Validate that `q`, `k`, `v` are `[heads, seq, dim]` tensors matching
/// `spec`, returning `(heads, seq, dim)`.
fn check_inputs(q: &Tensor, k: &Tensor, v: &Tensor, spec: &AttentionSpec) -> Result<(usize, usize, usize)> {
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rank() != 3 {
            return Err(Error::Dimension(format!(
                "{name} must have shape [heads, seq, dim], got {:?}",
                t.shape()
            )));
        }
    }
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Dimension(format!(
            "q, k, v shapes must match, got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (h, s, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if h != spec.num_heads || d != spec.head_dim {
        return Err(Error::Dimension(format!(
            "inputs are [{h}, {s}, {d}], expected {} heads of dim {}",
            spec.num_heads, spec.head_dim
        )));
    }
    Ok((h, s, d))
}

/// Full-sequence attention: `softmax(scale * Q Kᵀ) V` per head.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, spec: &AttentionSpec) -> Result<Tensor> {
    let (_, s, _) = check_inputs(q, k, v, spec)?;
    attention_impl(q, k, v, spec, s, None)
}

/// Dense attention restricted to the key blocks `mask` allows for each
/// query block. Disallowed logits are forced to `-inf` before the softmax,
/// so a key block outside the mask contributes exactly zero probability.
pub fn dense_attention_masked(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spec: &AttentionSpec,
    mask: &BlockMask,
) -> Result<Tensor> {
    let (h, s, _) = check_inputs(q, k, v, spec)?;
    mask.check_covers(h, s, s)?;
    attention_impl(q, k, v, spec, s, Some(mask))
}

fn attention_impl(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spec: &AttentionSpec,
    s: usize,
    mask: Option<&BlockMask>,
) -> Result<Tensor> {
    let d = spec.head_dim;
    let scale = spec.scale;
    let mut out = Tensor::zeros(&[spec.num_heads, s, d])?;
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let block = mask.map(|m| m.grid().block_size).unwrap_or(s);

    for_each_head(out.data_mut(), s * d, |h, out_h| {
        let qh = &qd[h * s * d..(h + 1) * s * d];
        let kh = &kd[h * s * d..(h + 1) * s * d];
        let vh = &vd[h * s * d..(h + 1) * s * d];
        let mut logits = vec![0.0f32; s];
        let mut acc = vec![0.0f64; d];
        for i in 0..s {
            let q_row = &qh[i * d..(i + 1) * d];
            for j in 0..s {
                logits[j] = dot(q_row, &kh[j * d..(j + 1) * d]) * scale;
            }
            if let Some(m) = mask {
                let qb = i / block;
                for kb in 0..s / block {
                    if !m.allowed(h, qb, kb) {
                        logits[kb * block..(kb + 1) * block].fill(f32::NEG_INFINITY);
                    }
                }
            }
            let m_row = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            acc.fill(0.0);
            let mut denom = 0.0f64;
            for j in 0..s {
                let e = f64::from(logits[j] - m_row).exp();
                if e == 0.0 {
                    continue;
                }
                denom += e;
                let v_row = &vh[j * d..(j + 1) * d];
                for c in 0..d {
                    acc[c] += e * f64::from(v_row[c]);
                }
            }
            let out_row = &mut out_h[i * d..(i + 1) * d];
            for c in 0..d {
                out_row[c] = (acc[c] / denom) as f32;
            }
        }
    });
    Ok(out)
}
