//! Uncertainty-aware regression for imbalanced time-series targets.
//!
//! The crate covers the full chain: synthetic data and splits ([`data`]),
//! density-based loss weights ([`kde`]), a small heteroscedastic regressor
//! trained with a combined L1 + Gaussian-NLL objective ([`net`]), post-hoc
//! scale calibration ([`calib`]), evaluation ([`metrics`]), a boosted-tree
//! decision layer ([`gbdt`]) and entropy-based filtering ([`filter`]).
//! [`pipeline`] wires them into the commands exposed by the CLI.

pub mod calib;
pub mod data;
pub mod error;
pub mod filter;
pub mod gbdt;
pub mod json;
pub mod kde;
pub mod metrics;
pub mod net;
pub mod pipeline;

pub use error::{Error, Result};
