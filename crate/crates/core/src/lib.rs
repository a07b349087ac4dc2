//! Hierarchical forecasting with coherency regularization applied during
//! training, plus post-hoc reconciliation baselines and evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod hierarchy;
pub mod models;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub mod metrics;
pub mod reconcile;
pub mod sharq;
