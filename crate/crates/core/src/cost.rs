//! Analytic training-cost model: step time and per-GPU memory as closed
//! forms over model shape, sequence length, and cluster size.
//!
//! Both formulas are normalized against a reference transformer
//! (hidden size 1792, sequence 3,047,424 tokens — a 256x384 latent over 31
//! frames), so their outputs are unitless relative costs. An optional
//! [`Calibration`] scales them into seconds and bytes once two real
//! measurements exist; every relative comparison works without it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden size of the reference model the step formula is normalized to.
pub const REFERENCE_DIM: f64 = 1792.0;
/// Sequence length of the reference workload: a 256x384 spatial latent
/// over 31 frames.
pub const REFERENCE_SEQ: f64 = 256.0 * 384.0 * 31.0;

/// Named model shape: transformer depth and widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPreset {
    pub name: &'static str,
    /// Transformer layers.
    pub layers: u64,
    /// Feed-forward width.
    pub ffn_dim: u64,
    /// Hidden size.
    pub dim: u64,
    /// Timestep-embedding width.
    pub time_dim: u64,
}

/// The three desk-reference configurations.
pub const PRESETS: [ModelPreset; 3] = [
    ModelPreset { name: "image-lite", layers: 50, ffn_dim: 10240, dim: 2560, time_dim: 512 },
    ModelPreset { name: "video-lite", layers: 32, ffn_dim: 7168, dim: 1792, time_dim: 512 },
    ModelPreset { name: "video-pro", layers: 60, ffn_dim: 16384, dim: 4096, time_dim: 1024 },
];

/// Look up a preset by its name.
pub fn preset(name: &str) -> Result<&'static ModelPreset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        Error::Parameter(format!(
            "unknown preset {name:?}; available: {}",
            PRESETS.map(|p| p.name).join(", ")
        ))
    })
}

/// One fully-specified training configuration to cost out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    /// Hidden size.
    pub dim: u64,
    /// Timestep-embedding width.
    pub time_dim: u64,
    /// Feed-forward width.
    pub ffn_dim: u64,
    /// Transformer layers.
    pub layers: u64,
    /// Per-GPU batch size.
    pub batch: u64,
    /// Sequence length in tokens.
    pub seq: u64,
    /// Number of GPUs sharded over.
    pub gpus: u64,
    /// Whether optimizer state lives off-GPU.
    pub offload: bool,
}

impl CostParams {
    pub fn from_preset(p: &ModelPreset, seq: u64, batch: u64, gpus: u64, offload: bool) -> Self {
        Self {
            dim: p.dim,
            time_dim: p.time_dim,
            ffn_dim: p.ffn_dim,
            layers: p.layers,
            batch,
            seq,
            gpus,
            offload,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim", self.dim),
            ("time_dim", self.time_dim),
            ("ffn_dim", self.ffn_dim),
            ("layers", self.layers),
            ("batch", self.batch),
            ("seq", self.seq),
            ("gpus", self.gpus),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive, got 0")));
            }
        }
        Ok(())
    }
}

/// Relative time of one optimizer step. Grows linearly in depth and batch,
/// and quadratically in sequence length through the attention term.
pub fn step_time(p: &CostParams) -> Result<f64> {
    p.validate()?;
    let d = p.dim as f64 / REFERENCE_DIM;
    let s = p.seq as f64 / REFERENCE_SEQ;
    Ok(d * s * (9.0 + 14.0 * s + 6.0 * d) * p.layers as f64 * p.batch as f64)
}

/// Relative per-GPU memory: sharded parameter/optimizer state plus the
/// larger of the gathered weights and the activations. With offload the
/// per-block activation term drops out of the activation branch; batch
/// size does not enter (one sequence is resident per GPU at a time).
pub fn gpu_memory(p: &CostParams) -> Result<f64> {
    p.validate()?;
    let (d, dt, df) = (p.dim as f64, p.time_dim as f64, p.ffn_dim as f64);
    let l = p.layers as f64;
    let n = p.gpus as f64;
    let s = p.seq as f64;
    let param = 9.0 * dt * d + 8.0 * d * d + 2.0 * df * d;
    let opt_state = 12.0 * l * param / n;
    let gathered = 4.0 * l * param / n;
    let per_token = if p.offload { 0.0 } else { l * d };
    let activations = 2.0 * s * (per_token + 18.0 * d + 2.0 * df);
    Ok(opt_state + gathered.max(activations))
}

/// Measured anchors that scale relative costs into seconds and bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Seconds per unit of relative step time.
    pub step_unit: f64,
    /// Bytes per unit of relative memory.
    pub memory_unit: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { step_unit: 1.0, memory_unit: 1.0 }
    }
}

impl Calibration {
    fn validate(&self) -> Result<()> {
        // Rejects NaN as well: a NaN unit fails the `> 0.0` test.
        let positive = |unit: f64| unit > 0.0;
        if !positive(self.step_unit) || !positive(self.memory_unit) {
            return Err(Error::Parameter(format!(
                "calibration units must be positive, got step {} and memory {}",
                self.step_unit, self.memory_unit
            )));
        }
        Ok(())
    }
}

/// One sweep result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub preset: String,
    pub d: u64,
    pub d_t: u64,
    pub d_f: u64,
    #[serde(rename = "L")]
    pub layers: u64,
    #[serde(rename = "B")]
    pub batch: u64,
    #[serde(rename = "S")]
    pub seq: u64,
    #[serde(rename = "N")]
    pub gpus: u64,
    pub offload: bool,
    pub step_time: f64,
    pub gpu_memory: f64,
}

/// Header for [`SweepRow::to_csv_row`].
pub const SWEEP_CSV_HEADER: &str = "preset,d,d_t,d_f,L,B,S,N,offload,step_time,gpu_memory";

/// Render a float with six significant digits, stable across platforms.
pub fn format_sig6(x: f64) -> String {
    format!("{x:.5e}")
}

impl SweepRow {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.preset,
            self.d,
            self.d_t,
            self.d_f,
            self.layers,
            self.batch,
            self.seq,
            self.gpus,
            u8::from(self.offload),
            format_sig6(self.step_time),
            format_sig6(self.gpu_memory),
        )
    }
}

/// Evaluate every combination of the given axes, in deterministic
/// preset-major order. All axes must be non-empty.
pub fn sweep(
    presets: &[&ModelPreset],
    seqs: &[u64],
    gpu_counts: &[u64],
    offloads: &[bool],
    batch: u64,
    calibration: Option<Calibration>,
) -> Result<Vec<SweepRow>> {
    if presets.is_empty() || seqs.is_empty() || gpu_counts.is_empty() || offloads.is_empty() {
        return Err(Error::Parameter(
            "sweep needs at least one preset, sequence length, GPU count, and offload setting"
                .into(),
        ));
    }
    let cal = calibration.unwrap_or_default();
    cal.validate()?;
    let mut rows = Vec::new();
    for p in presets {
        for &seq in seqs {
            for &gpus in gpu_counts {
                for &offload in offloads {
                    let params = CostParams::from_preset(p, seq, batch, gpus, offload);
                    rows.push(SweepRow {
                        preset: p.name.to_string(),
                        d: p.dim,
                        d_t: p.time_dim,
                        d_f: p.ffn_dim,
                        layers: p.layers,
                        batch,
                        seq,
                        gpus,
                        offload,
                        step_time: step_time(&params)? * cal.step_unit,
                        gpu_memory: gpu_memory(&params)? * cal.memory_unit,
                    });
                }
            }
        }
    }
    Ok(rows)
}
