//! Structured identity codes for large label spaces.
//!
//! Scalar labels are replaced by short integer codes: identities get
//! well-separated code vectors on the unit hypersphere, the vectors are
//! tokenized by hierarchical spherical k-means, and a backbone is trained to
//! predict each token with a small softmax plus an angular pull toward the
//! identity's code vector.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod sphere;
pub mod tokenizer;
pub mod nn;
pub mod data;
pub mod model;
pub mod baseline;
pub mod cost;
pub mod io;
pub mod pipeline;

pub use error::{GifError, Result};
