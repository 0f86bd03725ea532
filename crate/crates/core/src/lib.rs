//! Desk-scale engineering models for sparse-attention video transformers.
//!
//! This crate packages the pieces needed to reason about block-sparse
//! attention and the training pipeline around it, all on CPU and all
//! deterministic:
//!
//! - [`tensor`]: a dense row-major f32 tensor with the handful of kernels
//!   the rest of the crate needs.
//! - [`attention`]: dense multi-head attention, the ground truth every
//!   sparse result is checked against.
//! - [`reorder`]: raster-to-tile token permutations so spatial
//!   neighbourhoods become contiguous attention blocks.
//! - [`mask`]: block-level masks — pooled softmax maps, per-row CDF cuts,
//!   and local sliding-tile windows.
//! - [`sparse`]: the streaming block-sparse kernel plus a benchmark
//!   harness comparing it against the dense path.
//! - [`cost`]: closed-form step-time and GPU-memory models with named
//!   model presets.
//! - [`batch`]: aspect-bucketed FIFO batching with a deterministic
//!   image/video interleaver and tar-shard planning.
//! - [`soup`]: weighted checkpoint averaging, EMA included.
//! - [`rng`], [`io`], [`threads`]: seeded randomness, tensor/CSV
//!   containers, and the crate-wide thread cap.
//!
//! Every operation either returns a value that is a pure function of its
//! inputs (plus an explicit seed) or reports a typed [`Error`]. Wall-clock
//! measurements are confined to benchmark reports, in fields prefixed
//! `wall_`.

pub mod attention;
pub mod batch;
pub mod cost;
pub mod error;
pub mod io;
pub mod mask;
pub mod reorder;
pub mod rng;
pub mod soup;
pub mod sparse;
pub mod tensor;
pub mod threads;

pub use attention::{dense_attention, dense_attention_masked, AttentionSpec};
pub use batch::{
    plan_tar_packing, schedule, BatchPlan, LatentItem, Modality, QueuePolicy, ResolutionClass,
    ScheduleConfig, TaskMix,
};
pub use cost::{gpu_memory, step_time, Calibration, CostParams, ModelPreset, SweepRow};
pub use error::{Error, Result};
pub use mask::{
    build_nabla_mask, cdf_threshold, lowres_map, pool_sequence, sta_mask, BlockGrid, BlockMask,
    NablaConfig, DEFAULT_BLOCK_SIZE,
};
pub use reorder::{apply_reorder, build_reorder_plan, invert_reorder, ReorderPlan, VideoLayout};
pub use rng::Rng;
pub use soup::{ema_update, merge, soup_weights, ParamSet, WeightScheme, EMA_DECAY};
pub use sparse::{
    bench_sparse_vs_dense, block_sparse_attention, flop_counts, BenchConfig, SparseAttnReport,
};
pub use tensor::Tensor;

// Compile and run every code block in the guide as doctests, so the book
// can never drift from the API it documents.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/token-reordering.md")]
    mod token_reordering {}
    #[doc = include_str!("../../../book/src/adaptive-masks.md")]
    mod adaptive_masks {}
    #[doc = include_str!("../../../book/src/sparse-execution.md")]
    mod sparse_execution {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/batching.md")]
    mod batching {}
    #[doc = include_str!("../../../book/src/souping.md")]
    mod souping {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
