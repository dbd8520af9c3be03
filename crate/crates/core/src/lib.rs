//! Latent message passing between frozen vision-language backbones.
//!
//! A sender rolls its backbone forward in continuous embedding space,
//! compresses the rollout into a fixed number of universal tokens, and the
//! receiver decodes those tokens into a residual perturbation of its
//! image-token span. Per-agent affine maps into a shared reference space let
//! heterogeneous backbones exchange messages without pairwise adapters.

// `!(x > 0.0)` is how NaN-rejecting guards are written throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod autodiff;
pub mod codec;
pub mod config;
pub mod container;
pub mod distill;
pub mod error;
pub mod linalg;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod rollout;
pub mod runtime;
pub mod tensor;
pub mod vlm;

pub use error::{Error, Result};
pub use tensor::Tensor;
