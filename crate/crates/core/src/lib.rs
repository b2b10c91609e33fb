//! Toy multi-modal auto-regressive decoder with visual-token supervision.
//!
//! Images are split into patches, encoded, projected by an adapter into the
//! decoder's embedding space and interleaved with text embeddings. A causal
//! decoder is trained with next-token cross-entropy on text positions and,
//! once a vocabulary-projection head for visual embeddings has been fitted,
//! with a KL term that asks it to predict the vocabulary distribution
//! ("visual token") of the next image patch.

// `Scalar` may be f64, so casts to f64 are only redundant in the default build;
// `!(x > 0.0)` is deliberate where NaN must count as a failure.
#![allow(clippy::unnecessary_cast, clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
