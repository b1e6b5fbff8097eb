//! Sparse high-dimensional linear mixed models.
//!
//! The estimator partitions the sparse fixed-effect signal by predictor and
//! runs a parameter-expanded multi-cycle ECM loop: closed-form per-predictor
//! regressions on moment-filled Gram matrices (never `p × p`), empirical-Bayes
//! inclusion probabilities from a two-group model of the test statistics, and
//! Gaussian posterior moments of the cluster random effects.
//!
//! The crate is `no_std` (with `alloc`) unless the `std` feature is enabled.
//! The `parallel` feature runs the per-predictor and per-cluster work on rayon
//! with results identical to the serial path.
//!
//! Module map:
//! - [`data`]: clustered datasets, standardization, structural diagnostics
//! - [`moments`]: E-step moments of the latent partitions and random effects
//! - [`eb`]: test statistics, Storey null proportion, kernel density, `p_k`
//! - [`ecm`]: the M1/E1/M2/E2 engine and fit results
//! - [`predict`]: predictions with and without random effects
//! - [`simulate`]: Gaussian-random-field simulation design
//! - [`eval`]: metrics, null baseline, grouped cross-validation

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod data;
pub mod eb;
pub mod ecm;
mod error;
pub mod eval;
pub mod linalg;
pub mod math;
pub mod moments;
pub mod predict;
pub mod simulate;

pub use data::{Cluster, ClusteredDataset, Diagnostic, StandardizationRecord};
pub use ecm::{fit, EcmConfig, EcmRun, EcmState, FitResult};
pub use error::{Error, Result};
pub use predict::{predict, PredictionRequest, PredictionResult};
