//! Multi-cell traffic forecasting: truncated-SVD denoising, channel-independent
//! patching, a TCN-enhanced patch embedding and a Transformer encoder.
//!
//! The guide in `book/` walks through each stage; its Rust snippets are
//! compiled and run as doctests of this crate.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_io;
pub mod enhancement;
pub mod error;
pub mod eval;
pub mod kv;
pub mod matrix;
pub mod numerics;
pub mod predictor;
pub mod processing;
pub mod training;
pub mod tsvdr;

pub use error::{Error, Result};
pub use matrix::Matrix;

/// The guide's chapters, compiled as doctests so the book cannot drift from
/// the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tsvdr.md")]
    mod tsvdr {}
    #[doc = include_str!("../../../book/src/processing.md")]
    mod processing {}
    #[doc = include_str!("../../../book/src/enhancement.md")]
    mod enhancement {}
    #[doc = include_str!("../../../book/src/predictor.md")]
    mod predictor {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
