//! Forecasting for irregularly sampled multivariate time series.
//!
//! A [`model::TfMixer`] encodes each sample twice: a non-uniform DFT over
//! learnable frequencies ([`frequency`]) and a patch-based encoder with query
//! tokens and token/variable mixing ([`local_time`]). The two summaries are
//! fused and decoded per query timestamp ([`output`]). Training
//! ([`training`]) minimizes forecast MAE plus a weighted reconstruction MAE
//! of the history. Everything runs on the reverse-mode graph in [`tensor`].
//!
//! The guide in `book/` walks through each stage; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod frequency;
pub mod local_time;
pub mod model;
pub mod nn;
pub mod output;
pub mod revin;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Bindings, Gradients, Graph, NodeId, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/normalization.md")]
    mod normalization {}
    #[doc = include_str!("../../../book/src/frequency.md")]
    mod frequency {}
    #[doc = include_str!("../../../book/src/local-time.md")]
    mod local_time {}
    #[doc = include_str!("../../../book/src/output.md")]
    mod output {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
