//! Rebalanced contrastive learning for long-tail classification.
//!
//! - [`data`]: long-tail count profiles, synthetic Gaussian mixtures, two-view batches.
//! - [`losses`]: classifier and contrastive losses with analytic gradients.
//! - [`model`]: two-branch MLP, SGD, compression schedule, trainer, checkpoints.
//! - [`metrics`]: per-class accuracy summaries, Calinski–Harabasz, Davies–Bouldin, margins.
//! - [`harness`]: experiment configs, single runs, ablation grids, embedding comparison.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
