//! Guided causal-invariant learning for synthetic-to-real generalisation,
//! at desk scale.
//!
//! The crate bundles a small reverse-mode tensor engine, a procedural
//! content/style image generator, a staged convolutional encoder with a
//! momentum target and a frozen reference network, the relational
//! causal-invariance and pooled guidance objectives, a trainer, and the
//! representation diagnostics used to evaluate runs.

pub mod error;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub mod gradcheck;
pub mod scm;
pub mod encoder;
pub mod guidance;
pub mod invariance;
pub mod metrics;
pub mod trainer;
pub mod ablation;
