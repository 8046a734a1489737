//! Minimal reverse-mode autodiff for small transformer-style networks.
//!
//! Everything is a 2-D `f64` matrix. Batches of token sequences are stacked
//! row-wise and addressed through [`Segment`] lists, which keeps ragged
//! batches (different sequence lengths per sample) cheap to express.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod mat;
pub mod optim;
pub mod params;

pub use graph::{AttnLayout, Gradients, Graph, Segment, Var};
pub use layers::{BiGru, Builder, Embedding, Gru, Linear, Mlp, MultiHeadAttention};
pub use mat::Mat;
pub use optim::{Adam, OptimizerKind};
pub use params::{Grads, ParamId, ParamStore};
