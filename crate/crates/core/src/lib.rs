//! Spatio-temporal KV-cache compression for GUI-agent prompts that carry
//! several screenshots, together with reference eviction baselines,
//! attention-sparsity profiling, pixel-level saliency signals, an analytic
//! FLOPs model, and a synthetic trajectory workload.

pub mod baselines;
pub mod cache_model;
pub mod error;
pub mod flops;
pub mod numerics;
pub mod policy;
pub mod pixel_saliency;
pub mod scoring;
pub mod sparsity;
pub mod workload;

pub use cache_model::{CompressionConfig, KeepSet, LayerTrace, PromptLayout, Segment, SegmentKind};
pub use error::{Error, Result};
pub use numerics::Matrix;
pub use scoring::{compress_prompt, Method, ScoreSheet};
