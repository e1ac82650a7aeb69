//! Source attribution of diffusion latents from signal-leak cues.
//!
//! The pipeline re-noises latents at a few early diffusion steps, encodes each
//! step with a small convolutional network, pools the steps with learned
//! temporal attention and classifies the pooled embedding against gated class
//! prototypes. Frozen embeddings are also scored with diagonal Mahalanobis and
//! Gaussian KDE comparators for closed- and open-set evaluation.

pub mod autodiff;
pub mod cli;
pub mod container;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod explain;
pub mod head;
pub mod leaksim;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod scoring;
pub mod schedule;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
