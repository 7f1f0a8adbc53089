//! Convolutional networks whose kernels are replaced by groups of rank-one
//! factor vectors (CP-factorized convolution), with closed-form forward and
//! backward passes, a dense reference implementation, compression-ratio
//! accounting, and feature-significance inspection.
//!
//! Module map:
//! - [`tensor`]: dense column-major tensors and the contraction/reshaping
//!   primitives (vectorization, Kronecker product, unfolding, mode products,
//!   sliding-window patch expansion).
//! - [`cp`]: CP factor sets, reconstruction, and alternating-least-squares
//!   factorization of 4-way kernels.
//! - [`layers`]: the factorized convolution layer (fast and
//!   materialized-matrix backward paths), dense reference convolution, fully
//!   connected head, and softmax cross-entropy.
//! - [`network`]: network assembly, seeded initialization, SGD training,
//!   evaluation, parameter accounting, and feature-map inspection.
//! - [`data`]: IDX image files, a synthetic pattern generator, subsetting
//!   and batching.

pub mod cp;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod tensor;

pub use error::{CpacError, Result};
pub use tensor::Tensor;
