//! Bias auditing and debiasing kernels for language-model outputs.
//!
//! Everything here is a pure function over model outputs exported to the
//! NDJSON interchange format ([`interchange`]); no model is ever run.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod debias_ops;
pub mod embed_metrics;
pub mod error;
pub mod gentext_metrics;
pub mod gradcheck;
pub mod interchange;
pub mod loss_kernels;
pub mod numkit;
pub mod prob_metrics;

pub use error::{Error, Result};
pub use numkit::{Matrix, Vector};
