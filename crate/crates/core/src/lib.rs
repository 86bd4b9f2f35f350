//! Embedding-level outlier synthesis for out-of-distribution detection.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod embeddings;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod seed;
pub mod space;
pub mod vmf;

pub use error::{Error, Result};
