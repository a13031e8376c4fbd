//! Rényi-DP accounting for the subsampled Gaussian mechanism: per-step RDP
//! at integer orders, additive composition over steps, conversion to
//! (epsilon, delta)-DP, and calibration of the noise multiplier against a
//! target budget.
//!
//! The subsampled bound is the standard integer-order Poisson-subsampling
//! expression
//! `eps(alpha) = log( sum_j C(alpha,j) (1-q)^(alpha-j) q^j e^{j(j-1)/(2 sigma^2)} ) / (alpha-1)`,
//! evaluated in log space. At q = 1 it reduces to the plain Gaussian
//! mechanism's alpha / (2 sigma^2); at q = 0 it vanishes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-order RDP guarantees; orders strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    points: Vec<(f64, f64)>,
}

impl RdpCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput(
                "RDP curve needs at least one order".into(),
            ));
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::InvalidArgument(
                    "RDP orders must be strictly increasing".into(),
                ));
            }
        }
        for &(alpha, eps) in &points {
            if !(alpha > 1.0) || !eps.is_finite() || eps < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "invalid RDP point (alpha={alpha}, eps={eps})"
                )));
            }
        }
        Ok(RdpCurve { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// An (epsilon, delta) differential-privacy budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpBudget {
    pub epsilon: f64,
    pub delta: f64,
}

/// RDP -> DP conversion rule.
///
/// `Simple` is eps(alpha) + log(1/delta)/(alpha-1). `Refined` additionally
/// subtracts log(alpha)/(alpha-1) and adds log((alpha-1)/alpha); it is the
/// rule used by the common DP-SGD accounting libraries, and is the default
/// here because reported noise-multiplier tables are only reproduced under
/// it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conversion {
    Simple,
    #[default]
    Refined,
}

/// RDP of the plain Gaussian mechanism with unit sensitivity: alpha/(2 sigma^2).
pub fn rdp_gaussian(alpha: f64, sigma: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::Domain(format!("RDP order must be > 1, got {alpha}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "noise multiplier must be > 0, got {sigma}"
        )));
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

/// Integer-order RDP upper bound for one Poisson-subsampled Gaussian release.
pub fn rdp_subsampled_gaussian(alpha: f64, q: f64, sigma: f64) -> Result<f64> {
    if alpha.fract() != 0.0 || alpha < 2.0 {
        return Err(Error::Domain(format!(
            "subsampled RDP is implemented at integer orders >= 2, got {alpha}"
        )));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!(
            "subsampling rate must be in [0, 1], got {q}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "noise multiplier must be > 0, got {sigma}"
        )));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let a = alpha as u64;
    let ln_q = q.ln();
    let ln_1mq = (1.0 - q).ln(); // -inf at q = 1; those terms drop out
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);

    // Terms t_j = ln C(alpha, j) + (alpha-j) ln(1-q) + j ln q + j(j-1)/(2 sigma^2).
    let mut terms = Vec::with_capacity(a as usize + 1);
    let mut ln_binom = 0.0f64;
    for j in 0..=a {
        let coeff = if j == a && q == 1.0 {
            0.0
        } else {
            (a - j) as f64 * ln_1mq
        };
        let t = ln_binom + coeff + j as f64 * ln_q + (j * j.saturating_sub(1)) as f64 * inv2s2;
        if t.is_finite() {
            terms.push(t);
        }
        if j < a {
            ln_binom += ((a - j) as f64 / (j + 1) as f64).ln();
        }
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    // The sum dominates the binomial normalization, so lse >= 0 up to rounding.
    Ok(lse.max(0.0) / (alpha - 1.0))
}

/// The default order grid: 2..=64 plus 128 and 256.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (2..=64).map(|a| a as f64).collect();
    orders.push(128.0);
    orders.push(256.0);
    orders
}

/// Per-step RDP curve of the subsampled Gaussian on the given order grid.
pub fn subsampled_curve(q: f64, sigma: f64, orders: &[f64]) -> Result<RdpCurve> {
    let points = orders
        .iter()
        .map(|&a| Ok((a, rdp_subsampled_gaussian(a, q, sigma)?)))
        .collect::<Result<Vec<_>>>()?;
    RdpCurve::new(points)
}

/// Additive RDP composition over `steps` identical releases.
pub fn compose(per_step: &RdpCurve, steps: usize) -> RdpCurve {
    RdpCurve {
        points: per_step
            .points
            .iter()
            .map(|&(a, e)| (a, e * steps as f64))
            .collect(),
    }
}

fn convert_at(alpha: f64, rdp_eps: f64, delta: f64, conversion: Conversion) -> f64 {
    let base = rdp_eps + (1.0 / delta).ln() / (alpha - 1.0);
    match conversion {
        Conversion::Simple => base,
        Conversion::Refined => base - alpha.ln() / (alpha - 1.0) + ((alpha - 1.0) / alpha).ln(),
    }
}

/// Converts an RDP curve to an (epsilon, delta) budget, minimizing over
/// orders; ties break toward the smaller order. Also returns the order at
/// which the minimum is attained.
pub fn to_dp(curve: &RdpCurve, delta: f64, conversion: Conversion) -> Result<(DpBudget, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    let mut best: Option<(f64, f64)> = None;
    for &(alpha, rdp_eps) in curve.points() {
        let eps = convert_at(alpha, rdp_eps, delta, conversion);
        match best {
            Some((e, _)) if eps >= e => {}
            _ => best = Some((eps, alpha)),
        }
    }
    let (epsilon, alpha) = best.expect("curve is nonempty by construction");
    // Any mechanism is (eps, delta)-DP only for eps >= 0; clamp tiny
    // negative values produced by the refined rule at near-zero RDP.
    Ok((
        DpBudget {
            epsilon: epsilon.max(0.0),
            delta,
        },
        alpha,
    ))
}

/// The full conversion table, one row per order.
pub fn conversion_table(
    curve: &RdpCurve,
    delta: f64,
    conversion: Conversion,
) -> Vec<(f64, f64, f64)> {
    curve
        .points()
        .iter()
        .map(|&(a, r)| (a, r, convert_at(a, r, delta, conversion)))
        .collect()
}

/// End-to-end epsilon for T subsampled-Gaussian steps at rate q and noise
/// multiplier sigma.
pub fn epsilon_for(
    sigma: f64,
    q: f64,
    steps: usize,
    delta: f64,
    conversion: Conversion,
) -> Result<(DpBudget, f64)> {
    let curve = subsampled_curve(q, sigma, &default_orders())?;
    to_dp(&compose(&curve, steps), delta, conversion)
}

/// Search bracket for [`calibrate_sigma`]; covers noise multipliers from
/// essentially-non-private up to very high privacy.
pub const CALIBRATION_BRACKET: (f64, f64) = (0.3, 500.0);

/// Smallest sigma (within relative tolerance) whose composed, converted
/// epsilon meets the target budget. Monotone bisection over the bracket.
pub fn calibrate_sigma(
    target: &DpBudget,
    q: f64,
    steps: usize,
    rel_tol: f64,
    conversion: Conversion,
) -> Result<f64> {
    if !(target.epsilon > 0.0) {
        return Err(Error::Domain(format!(
            "target epsilon must be > 0, got {}",
            target.epsilon
        )));
    }
    let (mut lo, mut hi) = CALIBRATION_BRACKET;
    let eps_at = |sigma: f64| -> Result<f64> {
        Ok(epsilon_for(sigma, q, steps, target.delta, conversion)?
            .0
            .epsilon)
    };
    if eps_at(lo)? <= target.epsilon {
        // Even the smallest sigma in the bracket meets the target (e.g. T=0).
        return Ok(lo);
    }
    let eps_hi = eps_at(hi)?;
    if eps_hi > target.epsilon {
        return Err(Error::Numerical(format!(
            "calibration bracket exhausted: eps({hi}) = {eps_hi} still exceeds target {} \
             (q={q}, steps={steps}, delta={})",
            target.epsilon, target.delta
        )));
    }
    while (hi - lo) / hi > rel_tol {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? <= target.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_rdp_formula() {
        assert!((rdp_gaussian(2.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(rdp_gaussian(2.0, 1e9).unwrap() < 1e-15);
        let e = rdp_gaussian(10.0, 2.48779).unwrap();
        assert!((e - 10.0 / (2.0 * 2.48779 * 2.48779)).abs() < 1e-12);
        assert!((e - 0.8078).abs() < 1e-3);
        assert!(rdp_gaussian(1.0, 1.0).is_err());
        assert!(rdp_gaussian(2.0, 0.0).is_err());
    }

    #[test]
    fn subsampled_edges() {
        for alpha in [2.0, 7.0, 64.0] {
            assert_eq!(rdp_subsampled_gaussian(alpha, 0.0, 1.0).unwrap(), 0.0);
            let full = rdp_subsampled_gaussian(alpha, 1.0, 1.3).unwrap();
            let plain = rdp_gaussian(alpha, 1.3).unwrap();
            assert!(
                (full - plain).abs() < 1e-12,
                "alpha {alpha}: {full} vs {plain}"
            );
        }
        assert!(rdp_subsampled_gaussian(2.5, 0.1, 1.0).is_err());
        assert!(rdp_subsampled_gaussian(1.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn subsampled_never_exceeds_plain_gaussian() {
        for alpha in (2..=64).map(|a| a as f64) {
            for q in [0.01, 0.05, 0.1] {
                for sigma in [0.5, 1.0, 2.0, 10.0] {
                    let sub = rdp_subsampled_gaussian(alpha, q, sigma).unwrap();
                    let plain = rdp_gaussian(alpha, sigma).unwrap();
                    assert!(
                        sub <= plain + 1e-12,
                        "alpha={alpha} q={q} sigma={sigma}: {sub} > {plain}"
                    );
                }
            }
        }
    }

    #[test]
    fn subsampled_monotone_in_q() {
        for alpha in [2.0, 8.0, 32.0] {
            let mut prev = 0.0;
            for i in 1..=20 {
                let q = i as f64 / 20.0;
                let e = rdp_subsampled_gaussian(alpha, q, 1.5).unwrap();
                assert!(e >= prev - 1e-12, "alpha={alpha} q={q}");
                prev = e;
            }
        }
    }

    /// Quadrature oracle: the order-alpha Rényi divergence between the
    /// mixture (1-q) N(0, s^2) + q N(1, s^2) and N(0, s^2), integrated in
    /// log space over a grid that covers the shifted peak at x ~ alpha.
    pub(super) fn renyi_divergence_quadrature(alpha: u64, q: f64, sigma: f64) -> f64 {
        let a = alpha as f64;
        let ln_q = q.ln();
        let ln_1mq = (1.0 - q).ln();
        let inv_s2 = 1.0 / (sigma * sigma);
        let log_integrand = |x: f64| -> f64 {
            // ln nu(x) + alpha ln(mu(x)/nu(x))
            let t = (2.0 * x - 1.0) * 0.5 * inv_s2;
            let big = ln_q + t;
            let ratio = if big > ln_1mq {
                big + (ln_1mq - big).exp().ln_1p()
            } else {
                ln_1mq + (big - ln_1mq).exp().ln_1p()
            };
            -0.5 * x * x * inv_s2 - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln() + a * ratio
        };
        let lo = -14.0 * sigma - 1.0;
        let hi = a + 14.0 * sigma + 1.0;
        let h = sigma / 200.0;
        let n = {
            let m = ((hi - lo) / h).ceil() as usize;
            m + m % 2
        };
        let step = (hi - lo) / n as f64;
        // Log-domain composite Simpson.
        let mut max = f64::NEG_INFINITY;
        let logs: Vec<f64> = (0..=n)
            .map(|i| log_integrand(lo + step * i as f64))
            .collect();
        for &l in &logs {
            max = max.max(l);
        }
        let mut acc = 0.0;
        for (i, &l) in logs.iter().enumerate() {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * (l - max).exp();
        }
        let log_integral = max + (acc * step / 3.0).ln();
        log_integral / (a - 1.0)
    }

    #[test]
    fn subsampled_matches_quadrature_oracle() {
        let e = rdp_subsampled_gaussian(8.0, 0.01, 2.0).unwrap();
        let oracle = renyi_divergence_quadrature(8, 0.01, 2.0);
        assert!(
            (e - oracle).abs() < 1e-6,
            "bound {e} vs quadrature {oracle}"
        );
    }

    #[test]
    fn compose_scales_linearly() {
        let curve = RdpCurve::new(vec![(2.0, 0.5)]).unwrap();
        assert_eq!(compose(&curve, 0).points()[0], (2.0, 0.0));
        assert_eq!(compose(&curve, 1).points()[0], (2.0, 0.5));
        assert_eq!(compose(&curve, 4).points()[0], (2.0, 2.0));
    }

    #[test]
    fn curve_validation() {
        assert!(RdpCurve::new(vec![]).is_err());
        assert!(RdpCurve::new(vec![(2.0, 0.1), (2.0, 0.2)]).is_err());
        assert!(RdpCurve::new(vec![(2.0, -0.1)]).is_err());
        assert!(RdpCurve::new(vec![(0.5, 0.1)]).is_err());
    }

    #[test]
    fn to_dp_simple_rule_single_order() {
        let curve = RdpCurve::new(vec![(2.0, 1.0)]).unwrap();
        let (b, alpha) = to_dp(&curve, (-1.0f64).exp(), Conversion::Simple).unwrap();
        assert!((b.epsilon - 2.0).abs() < 1e-12);
        assert_eq!(alpha, 2.0);
    }

    #[test]
    fn to_dp_prefers_smaller_alpha_on_tie_and_minimizes() {
        let curve = RdpCurve::new(vec![(2.0, 0.0), (3.0, 0.0)]).unwrap();
        let delta = (-2.0f64).exp();
        let (b, alpha) = to_dp(&curve, delta, Conversion::Simple).unwrap();
        // min(2/1, 2/2) = 1 at alpha = 3.
        assert!((b.epsilon - 1.0).abs() < 1e-12);
        assert_eq!(alpha, 3.0);
    }

    #[test]
    fn mnist_recipe_epsilon_one() {
        let q = 4096.0 / 60_000.0;
        let steps = 300 * 15;
        let (b, _) = epsilon_for(18.28125, q, steps, 1e-5, Conversion::Refined).unwrap();
        assert!(
            (0.85..=1.15).contains(&b.epsilon),
            "epsilon {} outside [0.85, 1.15]",
            b.epsilon
        );
    }

    #[test]
    fn mnist_recipe_epsilon_ten() {
        let q = 4096.0 / 60_000.0;
        let steps = 300 * 15;
        let (b, _) = epsilon_for(2.48779, q, steps, 1e-5, Conversion::Refined).unwrap();
        assert!((8.5..=11.5).contains(&b.epsilon), "epsilon {}", b.epsilon);
    }

    #[test]
    fn calibration_matches_published_noise_values() {
        let q = 4096.0 / 60_000.0;
        let steps = 300 * 15;
        let target = DpBudget {
            epsilon: 10.0,
            delta: 1e-5,
        };
        let sigma = calibrate_sigma(&target, q, steps, 1e-4, Conversion::Refined).unwrap();
        assert!((sigma / 2.48779 - 1.0).abs() < 0.10, "sigma {sigma}");

        let n = 162_770.0f64;
        let q2 = 2048.0 / n;
        let steps2 = 300 * ((n / 2048.0).round() as usize);
        let target2 = DpBudget {
            epsilon: 1.0,
            delta: 1e-6,
        };
        let sigma2 = calibrate_sigma(&target2, q2, steps2, 1e-4, Conversion::Refined).unwrap();
        assert!((sigma2 / 8.82812 - 1.0).abs() < 0.10, "sigma {sigma2}");
    }

    #[test]
    fn calibration_zero_steps_returns_bracket_floor() {
        let target = DpBudget {
            epsilon: 1.0,
            delta: 1e-5,
        };
        let sigma = calibrate_sigma(&target, 0.01, 0, 1e-4, Conversion::Refined).unwrap();
        assert_eq!(sigma, CALIBRATION_BRACKET.0);
    }

    #[test]
    fn calibration_round_trips() {
        for (q, steps, eps) in [(0.05, 1000, 2.0), (0.01, 5000, 8.0), (0.1, 200, 0.5)] {
            let target = DpBudget {
                epsilon: eps,
                delta: 1e-5,
            };
            let sigma = calibrate_sigma(&target, q, steps, 1e-4, Conversion::Refined).unwrap();
            let (b, _) = epsilon_for(sigma, q, steps, 1e-5, Conversion::Refined).unwrap();
            assert!(
                b.epsilon <= eps + 1e-9,
                "q={q} steps={steps}: {} > {eps}",
                b.epsilon
            );
            // Within tolerance of the boundary from below.
            let (b_lo, _) =
                epsilon_for(sigma * (1.0 - 5e-4), q, steps, 1e-5, Conversion::Refined).unwrap();
            assert!(
                b_lo.epsilon > eps,
                "calibrated sigma not minimal at q={q} steps={steps}"
            );
        }
    }

    #[test]
    fn epsilon_monotone_in_sigma_steps_and_q() {
        let delta = 1e-5;
        let eps = |sigma: f64, q: f64, steps: usize| {
            epsilon_for(sigma, q, steps, delta, Conversion::Refined)
                .unwrap()
                .0
                .epsilon
        };
        // Nonincreasing in sigma.
        let mut prev = f64::INFINITY;
        for sigma in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let e = eps(sigma, 0.05, 500);
            assert!(e <= prev + 1e-12);
            prev = e;
        }
        // Nondecreasing in steps.
        let mut prev = 0.0;
        for steps in [0, 10, 100, 1000, 10_000] {
            let e = eps(2.0, 0.05, steps);
            assert!(e >= prev - 1e-12);
            prev = e;
        }
        // Nondecreasing in q.
        let mut prev = 0.0;
        for q in [0.005, 0.01, 0.05, 0.2, 1.0] {
            let e = eps(2.0, q, 500);
            assert!(e >= prev - 1e-12);
            prev = e;
        }
    }

    #[test]
    fn classical_gaussian_sufficient_condition_is_looser() {
        // For a single full-batch step, the classical sufficient noise
        // sigma = sqrt(2 ln(1.25/delta)) / eps gives an RDP-derived epsilon
        // at or below the target.
        let delta = 1e-5;
        for eps_target in [0.25, 0.5, 1.0] {
            let sigma = (2.0 * (1.25f64 / delta).ln()).sqrt() / eps_target;
            let curve = RdpCurve::new(
                default_orders()
                    .iter()
                    .map(|&a| (a, rdp_gaussian(a, sigma).unwrap()))
                    .collect(),
            )
            .unwrap();
            let (b, _) = to_dp(&curve, delta, Conversion::Refined).unwrap();
            assert!(
                b.epsilon <= eps_target,
                "target {eps_target}: RDP-derived epsilon {}",
                b.epsilon
            );
        }
    }
}
