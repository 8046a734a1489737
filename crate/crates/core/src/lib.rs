//! Multi-user MIMO uplink demodulation: linear baselines, diffusion-based
//! refinement with per-user timestep alignment, consistency distillation and
//! grouped successive interference cancellation.

pub mod aligner;
pub mod checkpoint;
pub mod cplx;
pub mod diffusion;
pub mod distill;
pub mod dit;
pub mod error;
pub mod linear;
pub mod metrics;
pub mod pipeline;
pub mod preset;
pub mod sysmodel;

pub use error::{Error, Result};
pub use preset::Preset;
