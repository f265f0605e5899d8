//! Synthetic trajectories, the trace file format, and output-error
//! evaluation of a compressed cache.

pub mod recon;
pub mod synth;
pub mod trace_io;

pub use recon::{prompt_reconstruction_error, reconstruction_error, window_probes, HeadError};
pub use synth::{gen_trajectory, Trajectory, TrajectoryParams};
pub use trace_io::{decode_trace, encode_trace, read_trace, write_trace, TraceFile};
