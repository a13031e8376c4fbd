//! Closed-form ground truth: a 2D Gaussian mixture with isotropic
//! components, its noise-perturbed density family, the analytic score and
//! the Bayes-optimal (posterior-mean) denoiser.
//!
//! Convolving the mixture with `N(0, sigma^2 I)` is again a mixture with
//! per-component variance `sigma0^2 + sigma^2`, so densities, scores and
//! ideal denoisers are exact at every noise level. Samplers, metrics and
//! trained models are all validated against this module.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, stream};

/// A point in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

// Inherent add/sub keep call sites chainable without operator imports.
#[allow(clippy::should_implement_trait)]
impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn add(self, other: Point2) -> Point2 {
        Point2::new(self.x + other.x, self.y + other.y)
    }

    pub fn sub(self, other: Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }

    pub fn scale(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm2().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A data point together with its mixture-component label. `None` is the
/// null token used for unconditional training and classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub point: Point2,
    pub label: Option<usize>,
}

/// An isotropic Gaussian mixture in the plane. All components share one
/// standard deviation; means and weights are arbitrary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub means: Vec<Point2>,
    pub component_std: f64,
    pub weights: Vec<f64>,
}

impl GmmSpec {
    /// Validates invariants: matching lengths, positive std, positive
    /// weights summing to one within 1e-12.
    pub fn new(means: Vec<Point2>, component_std: f64, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::EmptyInput(
                "mixture needs at least one component".into(),
            ));
        }
        if means.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: means.len(),
                got: weights.len(),
            });
        }
        if !(component_std > 0.0) || !component_std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "component_std must be positive and finite, got {component_std}"
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument(
                "all mixture weights must be positive".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must sum to 1 within 1e-12, got {total}"
            )));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(
                "mixture means must be finite".into(),
            ));
        }
        Ok(GmmSpec {
            means,
            component_std,
            weights,
        })
    }

    /// The default nine-mode layout: a diamond of side a/sqrt(2) with
    /// a = 1/sqrt(2), component std 1/25 and uniform weights. Neighbouring
    /// modes are 12.5 component-stds apart.
    pub fn default_nine() -> Self {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let means = vec![
            Point2::new(-a, 0.0),
            Point2::new(-a / 2.0, a / 2.0),
            Point2::new(0.0, a),
            Point2::new(-a / 2.0, -a / 2.0),
            Point2::new(0.0, 0.0),
            Point2::new(a / 2.0, a / 2.0),
            Point2::new(0.0, -a),
            Point2::new(a / 2.0, -a / 2.0),
            Point2::new(a, 0.0),
        ];
        let weights = vec![1.0 / 9.0; 9];
        GmmSpec::new(means, 1.0 / 25.0, weights).expect("default spec is valid")
    }

    /// A single-component mixture; handy wherever closed forms of the pure
    /// Gaussian case are needed.
    pub fn single(mean: Point2, component_std: f64) -> Result<Self> {
        GmmSpec::new(vec![mean], component_std, vec![1.0])
    }

    pub fn num_components(&self) -> usize {
        self.means.len()
    }
}

/// Draws `n` labeled samples: component k ~ weights, point ~ N(mu_k, sigma0^2 I).
/// Each sample uses its own counter-keyed stream, so sample i is the same
/// regardless of n and draws can run in any order.
pub fn sample_data(spec: &GmmSpec, n: usize, seed: u64) -> Vec<LabeledSample> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(seed, &[domain::DATA, i as u64]);
        let u: f64 = rng.gen();
        let mut k = spec.weights.len() - 1;
        let mut acc = 0.0;
        for (j, &w) in spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let point = spec.means[k].add(Point2::new(z1, z2).scale(spec.component_std));
        out.push(LabeledSample {
            point,
            label: Some(k),
        });
    }
    out
}

/// Density of the sigma-perturbed mixture: sum_k w_k N(x; mu_k, (sigma0^2+sigma^2) I).
/// Far from all modes the result underflows towards zero; that is a valid
/// output (use [`log_perturbed_density`] when the tail matters).
pub fn perturbed_density(spec: &GmmSpec, x: Point2, sigma: f64) -> f64 {
    debug_assert!(sigma >= 0.0);
    let s2 = spec.component_std * spec.component_std + sigma * sigma;
    let norm = 1.0 / (2.0 * PI * s2);
    let mut total = 0.0;
    for (mu, &w) in spec.means.iter().zip(&spec.weights) {
        let r2 = x.sub(*mu).norm2();
        total += w * norm * (-r2 / (2.0 * s2)).exp();
    }
    total
}

/// Log-density of the perturbed mixture, evaluated with log-sum-exp so it
/// stays finite arbitrarily far from the modes.
pub fn log_perturbed_density(spec: &GmmSpec, x: Point2, sigma: f64) -> f64 {
    debug_assert!(sigma >= 0.0);
    let s2 = spec.component_std * spec.component_std + sigma * sigma;
    let mut terms = [0.0f64; 16];
    let k = spec.means.len();
    let mut buf: Vec<f64>;
    let slots: &mut [f64] = if k <= 16 {
        &mut terms[..k]
    } else {
        buf = vec![0.0; k];
        &mut buf
    };
    let mut max = f64::NEG_INFINITY;
    for (j, (mu, &w)) in spec.means.iter().zip(&spec.weights).enumerate() {
        let r2 = x.sub(*mu).norm2();
        let t = w.ln() - r2 / (2.0 * s2);
        slots[j] = t;
        if t > max {
            max = t;
        }
    }
    let sum: f64 = slots.iter().map(|&t| (t - max).exp()).sum();
    max + sum.ln() - (2.0 * PI * s2).ln()
}

/// Posterior responsibilities of the components at noise level sigma,
/// computed with the log-sum-exp trick. At sigma = 0 the same formula
/// applies with variance sigma0^2 (the continuous limit).
fn responsibilities(spec: &GmmSpec, x: Point2, s2: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, (mu, &w)) in spec.means.iter().zip(&spec.weights).enumerate() {
        let r2 = x.sub(*mu).norm2();
        let t = w.ln() - r2 / (2.0 * s2);
        out[j] = t;
        if t > max {
            max = t;
        }
    }
    let mut sum = 0.0;
    for t in out.iter_mut() {
        *t = (*t - max).exp();
        sum += *t;
    }
    for t in out.iter_mut() {
        *t /= sum;
    }
}

/// Gradient of the log perturbed density:
/// sum_k w~_k(x) (mu_k - x) / (sigma0^2 + sigma^2).
pub fn analytic_score(spec: &GmmSpec, x: Point2, sigma: f64) -> Point2 {
    debug_assert!(sigma >= 0.0);
    let s2 = spec.component_std * spec.component_std + sigma * sigma;
    let k = spec.means.len();
    let mut buf = [0.0f64; 16];
    let mut heap: Vec<f64>;
    let resp: &mut [f64] = if k <= 16 {
        &mut buf[..k]
    } else {
        heap = vec![0.0; k];
        &mut heap
    };
    responsibilities(spec, x, s2, resp);
    let mut g = Point2::ZERO;
    for (mu, &r) in spec.means.iter().zip(resp.iter()) {
        g = g.add(mu.sub(x).scale(r / s2));
    }
    g
}

/// Bayes-optimal denoiser D*(x; sigma) = x + sigma^2 grad log p(x; sigma),
/// the posterior mean of the clean point given the noisy observation.
pub fn ideal_denoiser(spec: &GmmSpec, x: Point2, sigma: f64) -> Point2 {
    x.add(analytic_score(spec, x, sigma).scale(sigma * sigma))
}

/// Fraction of samples strictly inside any mode's `h * sigma0` ball.
/// For h <= 6 the default layout's modes are far enough apart that at most
/// one mode can qualify per point.
pub fn h_vicinity(spec: &GmmSpec, samples: &[Point2], h: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput(
            "h_vicinity of an empty sample list is undefined".into(),
        ));
    }
    let radius2 = (h * spec.component_std) * (h * spec.component_std);
    let hits = samples
        .iter()
        .filter(|p| spec.means.iter().any(|mu| p.sub(*mu).norm2() < radius2))
        .count();
    Ok(hits as f64 / samples.len() as f64)
}
