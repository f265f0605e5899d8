//! Prompt layouts, per-layer traces, keep sets, and observation attention.

mod attention;
mod config;
mod keep;
mod layout;
mod trace;

pub use attention::{
    aggregate_attention, causal_limit, is_causally_valid, observation_attention,
    query_head_attention,
};
pub use config::{
    CompressionConfig, DEFAULT_ALPHA, DEFAULT_EPSILON, DEFAULT_OMEGA, DEFAULT_POOL_KERNEL,
    DEFAULT_RANK, DEFAULT_TAU,
};
pub use keep::KeepSet;
pub use layout::{gui_layout, PromptLayout, Segment, SegmentKind};
pub use trace::LayerTrace;
