//! Differentially private diffusion models on a desk-scale testbed.
//!
//! This crate trains small denoiser networks with DP-SGD (per-sample
//! clipping, Gaussian sanitization, Rényi-DP accounting, noise multiplicity)
//! and samples from them with DDIM and Churn solvers. Everything is
//! validated against a two-dimensional Gaussian mixture whose perturbed
//! densities, scores and Bayes-optimal denoiser are available in closed
//! form, so the full pipeline is testable without any large-scale compute.

// Validation deliberately writes `!(x > 0.0)` so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod checkpoint;
pub mod dm;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod gmm;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
pub use gmm::{GmmSpec, LabeledSample, Point2};

/// Formats a float with 17 significant digits, enough to round-trip f64.
/// All CSV output in this crate goes through this function so that files
/// are byte-stable across runs.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        }
    } else {
        format!("{x:.16e}")
    }
}
