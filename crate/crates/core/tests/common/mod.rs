//! Shared oracles for the integration tests. Everything here is computed
//! independently of the library code paths it checks.

use dp_diffusion::gmm::Point2;
use dp_diffusion::samplers::ScheduleSpec;

/// Order-alpha Rényi divergence between the mixture
/// (1-q) N(0, s^2) + q N(1, s^2) and N(0, s^2), by log-domain Simpson
/// quadrature over a grid covering the shifted peak near x ~ alpha.
pub fn renyi_divergence_quadrature(alpha: u64, q: f64, sigma: f64) -> f64 {
    let a = alpha as f64;
    let ln_q = q.ln();
    let ln_1mq = (1.0 - q).ln();
    let inv_s2 = 1.0 / (sigma * sigma);
    let log_integrand = |x: f64| -> f64 {
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
    let logs: Vec<f64> = (0..=n)
        .map(|i| log_integrand(lo + step * i as f64))
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
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
    (max + (acc * step / 3.0).ln()) / (a - 1.0)
}

/// Exact Probability-Flow endpoint for a single Gaussian N(mu, s0^2 I):
/// along the flow (x - mu) scales by sqrt((s0^2+smin^2)/(s0^2+smax^2));
/// the terminal denoise then shrinks by s0^2/(s0^2+smin^2).
pub fn single_gaussian_flow_endpoint(
    mu: Point2,
    s0: f64,
    sched: &ScheduleSpec,
    x0: Point2,
) -> Point2 {
    let s02 = s0 * s0;
    let flow_scale = ((s02 + sched.sigma_min * sched.sigma_min)
        / (s02 + sched.sigma_max * sched.sigma_max))
        .sqrt();
    let x_flow = mu.add(x0.sub(mu).scale(flow_scale));
    let shrink = s02 / (s02 + sched.sigma_min * sched.sigma_min);
    mu.add(x_flow.sub(mu).scale(shrink))
}

/// Least-squares slope of y against x.
pub fn regression_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>()
}
