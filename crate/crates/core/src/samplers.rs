//! Generation-time solvers: the rho-spaced sigma schedule, deterministic and
//! stochastic DDIM, the Churn sampler with its Heun correction, score
//! extraction from a denoiser, and classifier-free guidance mixing.
//!
//! All samplers run against anything implementing [`Denoiser`] — a trained
//! network or the analytic mixture oracle. Particle trajectories are
//! independent and integrate in parallel with per-particle counter-based
//! random streams, so results are deterministic for a given seed regardless
//! of thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{ideal_denoiser, GmmSpec, Point2};
use crate::net::{forward, DenoiserParams};
use crate::rng::{domain, stream};

/// A sigma-conditioned denoiser.
pub trait Denoiser: Sync {
    fn denoise(&self, x: Point2, sigma: f64) -> Point2;
}

impl<F: Fn(Point2, f64) -> Point2 + Sync> Denoiser for F {
    fn denoise(&self, x: Point2, sigma: f64) -> Point2 {
        self(x, sigma)
    }
}

/// The analytic Bayes-optimal denoiser of a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub spec: GmmSpec,
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, x: Point2, sigma: f64) -> Point2 {
        ideal_denoiser(&self.spec, x, sigma)
    }
}

/// A trained network viewed as a denoiser, optionally label-conditioned.
pub struct ModelDenoiser<'a> {
    pub params: &'a DenoiserParams,
    pub cfg: &'a crate::dm::DmConfig,
    pub label: Option<usize>,
}

impl Denoiser for ModelDenoiser<'_> {
    fn denoise(&self, x: Point2, sigma: f64) -> Point2 {
        forward(self.params, self.cfg, x, sigma, self.label)
            .expect("samplers only evaluate at sigma > 0")
    }
}

/// The rho-spaced noise schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps_m: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl ScheduleSpec {
    pub fn with_steps(steps_m: usize) -> Self {
        ScheduleSpec {
            steps_m,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }

    /// sigma_i = (smax^(1/rho) + i/(M-1) (smin^(1/rho) - smax^(1/rho)))^rho,
    /// strictly decreasing with exact endpoints.
    pub fn sigmas(&self) -> Result<Vec<f64>> {
        if self.steps_m < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 steps, got {}",
                self.steps_m
            )));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        let m = self.steps_m;
        let inv_rho = 1.0 / self.rho;
        let hi = self.sigma_max.powf(inv_rho);
        let lo = self.sigma_min.powf(inv_rho);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let u = hi + (i as f64 / (m - 1) as f64) * (lo - hi);
            out.push(u.powf(self.rho));
        }
        out[0] = self.sigma_max;
        out[m - 1] = self.sigma_min;
        Ok(out)
    }
}

/// Churn-sampler knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChurnSpec {
    pub s_churn: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub s_noise: f64,
}

impl Default for ChurnSpec {
    fn default() -> Self {
        ChurnSpec {
            s_churn: 50.0,
            s_min: 0.05,
            s_max: 50.0,
            s_noise: 1.0,
        }
    }
}

impl ChurnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.s_churn < 0.0
            || self.s_min < 0.0
            || self.s_max < self.s_min
            || !(self.s_noise > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid churn settings: {self:?}"
            )));
        }
        Ok(())
    }

    /// gamma_i = min(S_churn/M, sqrt(2)-1) inside [S_min, S_max], else 0.
    pub fn gamma(&self, steps_m: usize, sigma: f64) -> f64 {
        if sigma >= self.s_min && sigma <= self.s_max {
            (self.s_churn / steps_m as f64).min(2f64.sqrt() - 1.0)
        } else {
            0.0
        }
    }
}

/// Classifier-free guidance settings. The default (w = 0, no label) is
/// plain unconditional sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSpec {
    pub scale_w: f64,
    pub label: Option<usize>,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec {
            scale_w: 0.0,
            label: None,
        }
    }
}

/// Score parameterization s(x; sigma) = (D(x; sigma) - x) / sigma^2.
pub fn score_from_denoiser(d: &impl Denoiser, x: Point2, sigma: f64) -> Result<Point2> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "score extraction requires sigma > 0, got {sigma}"
        )));
    }
    Ok(d.denoise(x, sigma).sub(x).scale(1.0 / (sigma * sigma)))
}

/// D^w(x; sigma, y) = (1-w) D(x; sigma) + w D(x; sigma, y). The w = 0 and
/// w = 1 cases short-circuit to the corresponding denoiser so that guided
/// runs are bit-identical to unguided ones.
pub struct GuidedDenoiser<C: Denoiser, U: Denoiser> {
    pub cond: C,
    pub uncond: U,
    pub scale_w: f64,
}

impl<C: Denoiser, U: Denoiser> Denoiser for GuidedDenoiser<C, U> {
    fn denoise(&self, x: Point2, sigma: f64) -> Point2 {
        if self.scale_w == 1.0 {
            self.cond.denoise(x, sigma)
        } else if self.scale_w == 0.0 {
            self.uncond.denoise(x, sigma)
        } else {
            let c = self.cond.denoise(x, sigma);
            let u = self.uncond.denoise(x, sigma);
            u.scale(1.0 - self.scale_w).add(c.scale(self.scale_w))
        }
    }
}

/// DDIM variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DdimMode {
    Deterministic,
    Stochastic,
}

/// One DDIM update from sigma_cur down to sigma_next. The stochastic branch
/// doubles the drift and injects sqrt(2 (sigma_cur - sigma_next) sigma_cur)
/// of fresh noise.
pub fn ddim_step(
    d: &impl Denoiser,
    x: Point2,
    sigma_cur: f64,
    sigma_next: f64,
    mode: DdimMode,
    rng: Option<&mut ChaCha12Rng>,
) -> Point2 {
    let den = d.denoise(x, sigma_cur);
    let drift = x.sub(den).scale((sigma_next - sigma_cur) / sigma_cur);
    match mode {
        DdimMode::Deterministic => x.add(drift),
        DdimMode::Stochastic => {
            let rng = rng.expect("stochastic DDIM needs a random stream");
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let scale = (2.0 * (sigma_cur - sigma_next) * sigma_cur).sqrt();
            x.add(drift.scale(2.0))
                .add(Point2::new(z1, z2).scale(scale))
        }
    }
}

/// Deterministic DDIM trajectory from a given start, including the final
/// explicit denoise at sigma_min.
pub fn ddim_run_deterministic(d: &impl Denoiser, sigmas: &[f64], x0: Point2) -> Point2 {
    let mut x = x0;
    for w in sigmas.windows(2) {
        x = ddim_step(d, x, w[0], w[1], DdimMode::Deterministic, None);
    }
    d.denoise(x, sigmas[sigmas.len() - 1])
}

fn ddim_run_stochastic(
    d: &impl Denoiser,
    sigmas: &[f64],
    x0: Point2,
    rng: &mut ChaCha12Rng,
) -> Point2 {
    let mut x = x0;
    for w in sigmas.windows(2) {
        x = ddim_step(d, x, w[0], w[1], DdimMode::Stochastic, Some(rng));
    }
    d.denoise(x, sigmas[sigmas.len() - 1])
}

/// Draws n samples with the DDIM solver. Initial points are
/// N(0, sigma_max^2 I); in deterministic mode the seed only affects those
/// initial draws.
pub fn ddim_sample(
    d: &impl Denoiser,
    spec: &ScheduleSpec,
    mode: DdimMode,
    n: usize,
    seed: u64,
) -> Result<Vec<Point2>> {
    let sigmas = spec.sigmas()?;
    let out = (0..n)
        .into_par_iter()
        .map(|p| {
            let x0 = draw_initial(sigmas[0], seed, p as u64);
            match mode {
                DdimMode::Deterministic => ddim_run_deterministic(d, &sigmas, x0),
                DdimMode::Stochastic => {
                    let mut path = stream(seed, &[domain::SAMPLER_PATH, p as u64]);
                    ddim_run_stochastic(d, &sigmas, x0, &mut path)
                }
            }
        })
        .collect();
    Ok(out)
}

/// The initial draw x_0 ~ N(0, sigma_max^2 I) of particle `particle`; part
/// of the determinism contract, so callers can reproduce per-particle
/// starting points.
pub fn draw_initial(sigma_max: f64, seed: u64, particle: u64) -> Point2 {
    let mut rng = stream(seed, &[domain::SAMPLER_INIT, particle]);
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    Point2::new(z1, z2).scale(sigma_max)
}

/// The noise-inflation sub-step of the Churn sampler: lift the particle
/// from level sigma to sigma~ = (1+gamma) sigma with fresh noise scaled by
/// S_noise.
pub fn churn_inflate(
    x: Point2,
    sigma: f64,
    gamma: f64,
    s_noise: f64,
    rng: &mut ChaCha12Rng,
) -> (Point2, f64) {
    let sigma_hat = (1.0 + gamma) * sigma;
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let eps = Point2::new(z1, z2).scale(s_noise);
    let lift = (sigma_hat * sigma_hat - sigma * sigma).max(0.0).sqrt();
    (x.add(eps.scale(lift)), sigma_hat)
}

/// Draws n samples with the Churn sampler: per step, inflate the noise
/// level by gamma, take an Euler step toward sigma_{n+1}, and apply the
/// Heun correction except into the terminal sigma_M = 0. Denoiser
/// evaluations clamp the inflated level to sigma_max (networks are only
/// trained up to there); clamping events are counted and logged.
pub fn churn_sample(
    d: &impl Denoiser,
    spec: &ScheduleSpec,
    churn: &ChurnSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Point2>> {
    churn.validate()?;
    let mut sigmas = spec.sigmas()?;
    sigmas.push(0.0);
    let m = spec.steps_m;
    let clamps = AtomicUsize::new(0);
    let out: Vec<Point2> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut x = draw_initial(sigmas[0], seed, p as u64);
            let mut path = stream(seed, &[domain::SAMPLER_PATH, p as u64]);
            for i in 0..m {
                let (sigma, sigma_next) = (sigmas[i], sigmas[i + 1]);
                let gamma = churn.gamma(m, sigma);
                let (x_hat, sigma_hat) = churn_inflate(x, sigma, gamma, churn.s_noise, &mut path);
                let sigma_eval = if sigma_hat > spec.sigma_max {
                    clamps.fetch_add(1, Ordering::Relaxed);
                    spec.sigma_max
                } else {
                    sigma_hat
                };
                let den = d.denoise(x_hat, sigma_eval);
                let f = x_hat.sub(den).scale(1.0 / sigma_hat);
                let mut x_next = x_hat.add(f.scale(sigma_next - sigma_hat));
                if sigma_next != 0.0 {
                    let den2 = d.denoise(x_next, sigma_next);
                    let f2 = x_next.sub(den2).scale(1.0 / sigma_next);
                    x_next = x_hat.add(f.add(f2).scale(0.5 * (sigma_next - sigma_hat)));
                }
                x = x_next;
            }
            x
        })
        .collect();
    let clamped = clamps.into_inner();
    if clamped > 0 {
        log::warn!("churn sampler clamped {clamped} denoiser evaluations to sigma_max");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{h_vicinity, sample_data};
    use rand::Rng;

    #[test]
    fn schedule_endpoints_and_shape() {
        let s = ScheduleSpec::with_steps(2).sigmas().unwrap();
        assert_eq!(s, vec![80.0, 0.002]);
        let s3 = ScheduleSpec::with_steps(3).sigmas().unwrap();
        assert!((s3[1] - 2.515).abs() < 2e-3, "middle sigma {}", s3[1]);
        let lin = ScheduleSpec {
            steps_m: 3,
            sigma_min: 1.0,
            sigma_max: 3.0,
            rho: 1.0,
        }
        .sigmas()
        .unwrap();
        assert!((lin[1] - 2.0).abs() < 1e-12);
        assert_eq!(lin[0], 3.0);
        assert_eq!(lin[2], 1.0);
    }

    #[test]
    fn schedule_rejects_bad_specs() {
        assert!(ScheduleSpec::with_steps(1).sigmas().is_err());
        assert!(ScheduleSpec {
            steps_m: 5,
            sigma_min: 2.0,
            sigma_max: 1.0,
            rho: 7.0
        }
        .sigmas()
        .is_err());
        assert!(ScheduleSpec {
            steps_m: 5,
            sigma_min: 0.1,
            sigma_max: 1.0,
            rho: 0.0
        }
        .sigmas()
        .is_err());
    }

    #[test]
    fn schedule_monotone_endpoint_exact_randomized() {
        let mut rng = stream(41, &[domain::METRIC]);
        for _ in 0..100 {
            let m = rng.gen_range(2..400);
            let rho = rng.gen_range(0.5..12.0);
            let smin = rng.gen_range(1e-3..0.5);
            let smax = smin * rng.gen_range(1.5..200.0);
            let spec = ScheduleSpec {
                steps_m: m,
                sigma_min: smin,
                sigma_max: smax,
                rho,
            };
            let s = spec.sigmas().unwrap();
            assert_eq!(s[0], smax);
            assert_eq!(s[m - 1], smin);
            assert!(
                s.windows(2).all(|w| w[1] < w[0]),
                "not decreasing: {spec:?}"
            );
        }
    }

    #[test]
    fn score_from_ideal_denoiser_is_analytic_score() {
        let spec = GmmSpec::default_nine();
        let oracle = OracleDenoiser { spec: spec.clone() };
        let mut rng = stream(43, &[domain::METRIC]);
        for _ in 0..50 {
            let x = Point2::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let sigma = rng.gen_range(0.01..5.0);
            let s = score_from_denoiser(&oracle, x, sigma).unwrap();
            let a = crate::gmm::analytic_score(&spec, x, sigma);
            assert!(s.sub(a).norm() < 1e-10, "{s:?} vs {a:?}");
        }
    }

    #[test]
    fn score_of_identity_denoiser_is_zero() {
        let identity = |x: Point2, _sigma: f64| x;
        let s = score_from_denoiser(&identity, Point2::new(3.0, -1.0), 0.5).unwrap();
        assert_eq!(s, Point2::ZERO);
        assert!(score_from_denoiser(&identity, Point2::ZERO, 0.0).is_err());
    }

    #[test]
    fn score_single_gaussian_closed_form() {
        let mu = Point2::new(0.3, 0.3);
        let spec = GmmSpec::single(mu, 0.2).unwrap();
        let oracle = OracleDenoiser { spec };
        let x = Point2::new(-0.5, 1.0);
        let sigma = 0.7;
        let s = score_from_denoiser(&oracle, x, sigma).unwrap();
        let expect = mu.sub(x).scale(1.0 / (0.04 + sigma * sigma));
        assert!(s.sub(expect).norm() < 1e-12);
    }

    #[test]
    fn guidance_mixing() {
        let c = |_: Point2, _: f64| Point2::new(1.0, 2.0);
        let u = |_: Point2, _: f64| Point2::ZERO;
        let g2 = GuidedDenoiser {
            cond: c,
            uncond: u,
            scale_w: 2.0,
        };
        assert_eq!(g2.denoise(Point2::ZERO, 1.0), Point2::new(2.0, 4.0));
        let g1 = GuidedDenoiser {
            cond: c,
            uncond: u,
            scale_w: 1.0,
        };
        assert_eq!(g1.denoise(Point2::ZERO, 1.0), Point2::new(1.0, 2.0));
        let g0 = GuidedDenoiser {
            cond: c,
            uncond: u,
            scale_w: 0.0,
        };
        assert_eq!(g0.denoise(Point2::ZERO, 1.0), Point2::ZERO);
    }

    #[test]
    fn guidance_extremes_bit_identical_to_unguided() {
        let spec = GmmSpec::default_nine();
        let cond = OracleDenoiser { spec: spec.clone() };
        let uncond = OracleDenoiser { spec: spec.clone() };
        let sched = ScheduleSpec::with_steps(20);
        for w in [0.0, 1.0] {
            let guided = GuidedDenoiser {
                cond: OracleDenoiser { spec: spec.clone() },
                uncond: OracleDenoiser { spec: spec.clone() },
                scale_w: w,
            };
            let a = ddim_sample(&guided, &sched, DdimMode::Stochastic, 32, 7).unwrap();
            let plain = if w == 1.0 { &cond } else { &uncond };
            let b = ddim_sample(plain, &sched, DdimMode::Stochastic, 32, 7).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert_eq!(p.x.to_bits(), q.x.to_bits());
                assert_eq!(p.y.to_bits(), q.y.to_bits());
            }
        }
    }

    #[test]
    fn ddim_deterministic_given_seed() {
        let oracle = OracleDenoiser {
            spec: GmmSpec::default_nine(),
        };
        let sched = ScheduleSpec::with_steps(30);
        for mode in [DdimMode::Deterministic, DdimMode::Stochastic] {
            let a = ddim_sample(&oracle, &sched, mode, 1, 123).unwrap();
            let b = ddim_sample(&oracle, &sched, mode, 1, 123).unwrap();
            assert_eq!(a[0].x.to_bits(), b[0].x.to_bits());
            assert_eq!(a[0].y.to_bits(), b[0].y.to_bits());
        }
    }

    /// Closed-form Probability-Flow endpoint for a single Gaussian:
    /// (x - mu) scales by sqrt((s0^2+smin^2)/(s0^2+smax^2)) along the flow;
    /// the terminal denoise then shrinks by s0^2/(s0^2+smin^2).
    fn closed_form_endpoint(mu: Point2, s0: f64, sched: &ScheduleSpec, x0: Point2) -> Point2 {
        let s02 = s0 * s0;
        let flow_scale = ((s02 + sched.sigma_min * sched.sigma_min)
            / (s02 + sched.sigma_max * sched.sigma_max))
            .sqrt();
        let x_flow = mu.add(x0.sub(mu).scale(flow_scale));
        let shrink = s02 / (s02 + sched.sigma_min * sched.sigma_min);
        mu.add(x_flow.sub(mu).scale(shrink))
    }

    #[test]
    fn ddim_deterministic_tracks_closed_form_flow() {
        let mu = Point2::new(0.4, -0.2);
        let s0 = 1.0 / 25.0;
        let oracle = OracleDenoiser {
            spec: GmmSpec::single(mu, s0).unwrap(),
        };
        let sched = ScheduleSpec::with_steps(200);
        let sigmas = sched.sigmas().unwrap();
        let mut rng = stream(3, &[domain::METRIC]);
        for _ in 0..20 {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let x0 = Point2::new(z1, z2).scale(sched.sigma_max);
            let end = ddim_run_deterministic(&oracle, &sigmas, x0);
            let expect = closed_form_endpoint(mu, s0, &sched, x0);
            assert!(end.sub(expect).norm() < 1e-2, "{end:?} vs {expect:?}");
        }
    }

    #[test]
    fn churn_without_churn_is_heun_and_beats_euler() {
        let mu = Point2::new(0.4, -0.2);
        let s0 = 1.0 / 25.0;
        let oracle = OracleDenoiser {
            spec: GmmSpec::single(mu, s0).unwrap(),
        };
        let sched = ScheduleSpec::with_steps(100);
        let churn = ChurnSpec {
            s_churn: 0.0,
            s_min: 0.0,
            s_max: 0.0,
            s_noise: 1.0,
        };
        let n = 50;
        let samples = churn_sample(&oracle, &sched, &churn, n, 11).unwrap();
        let mut max_err: f64 = 0.0;
        for (p, got) in samples.iter().enumerate() {
            let x0 = draw_initial(sched.sigma_max, 11, p as u64);
            // With sigma_M = 0 the final Euler sub-step lands exactly on the
            // denoised point, i.e. the closed-form flow plus terminal denoise.
            let expect = closed_form_endpoint(mu, s0, &sched, x0);
            max_err = max_err.max(got.sub(expect).norm());
        }
        assert!(max_err < 1e-3, "Heun endpoint error {max_err}");
    }

    #[test]
    fn churn_gamma_clamps() {
        let churn = ChurnSpec {
            s_churn: 1000.0,
            s_min: 0.0,
            s_max: 100.0,
            s_noise: 1.0,
        };
        for sigma in [0.01, 1.0, 50.0] {
            assert!((churn.gamma(10, sigma) - (2f64.sqrt() - 1.0)).abs() < 1e-15);
        }
        let out_of_range = ChurnSpec {
            s_churn: 1000.0,
            s_min: 0.05,
            s_max: 10.0,
            s_noise: 1.0,
        };
        assert_eq!(out_of_range.gamma(10, 20.0), 0.0);
        assert_eq!(out_of_range.gamma(10, 0.01), 0.0);
    }

    #[test]
    fn stochastic_ddim_single_step_preserves_marginals() {
        // Starting from exact samples of p(x; sigma_n) for a single
        // Gaussian, one stochastic step reproduces the mean and covariance
        // of p(x; sigma_{n+1}) up to Monte-Carlo error.
        let mu = Point2::new(0.25, -0.5);
        let s0 = 0.3;
        let spec = GmmSpec::single(mu, s0).unwrap();
        let oracle = OracleDenoiser { spec: spec.clone() };
        let (sigma_n, sigma_next) = (1.0, 0.98);
        let n = 100_000;
        let clean = sample_data(&spec, n, 19);
        let mut sum = Point2::ZERO;
        let mut sumsq = Point2::ZERO;
        for (i, s) in clean.iter().enumerate() {
            let mut rng = stream(20, &[domain::METRIC, i as u64]);
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let x = s.point.add(Point2::new(z1, z2).scale(sigma_n));
            let mut path = stream(21, &[domain::SAMPLER_PATH, i as u64]);
            let y = ddim_step(
                &oracle,
                x,
                sigma_n,
                sigma_next,
                DdimMode::Stochastic,
                Some(&mut path),
            );
            sum = sum.add(y);
            sumsq = sumsq.add(Point2::new(y.x * y.x, y.y * y.y));
        }
        let mean = sum.scale(1.0 / n as f64);
        let var = Point2::new(
            sumsq.x / n as f64 - mean.x * mean.x,
            sumsq.y / n as f64 - mean.y * mean.y,
        );
        let expect_var = s0 * s0 + sigma_next * sigma_next;
        let mc_tol_mean = 4.0 * (expect_var / n as f64).sqrt();
        let mc_tol_var = 5.0 * expect_var * (2.0 / n as f64).sqrt();
        assert!(mean.sub(mu).norm() < mc_tol_mean, "mean {mean:?} vs {mu:?}");
        assert!(
            (var.x - expect_var).abs() < mc_tol_var,
            "var x {} vs {expect_var}",
            var.x
        );
        assert!(
            (var.y - expect_var).abs() < mc_tol_var,
            "var y {} vs {expect_var}",
            var.y
        );
    }

    #[test]
    fn churn_inflation_preserves_single_gaussian_marginal() {
        let mu = Point2::new(-0.1, 0.2);
        let s0 = 0.25;
        let spec = GmmSpec::single(mu, s0).unwrap();
        let sigma = 0.8;
        let gamma = 0.3;
        let n = 100_000;
        let clean = sample_data(&spec, n, 23);
        let mut sumsq = 0.0;
        let mut sigma_hat_seen = 0.0;
        for (i, s) in clean.iter().enumerate() {
            let mut rng = stream(24, &[domain::METRIC, i as u64]);
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let x = s.point.add(Point2::new(z1, z2).scale(sigma));
            let mut path = stream(25, &[domain::SAMPLER_PATH, i as u64]);
            let (x_hat, sigma_hat) = churn_inflate(x, sigma, gamma, 1.0, &mut path);
            sigma_hat_seen = sigma_hat;
            let d = x_hat.sub(mu);
            sumsq += 0.5 * d.norm2();
        }
        let var = sumsq / n as f64;
        let expect = s0 * s0 + sigma_hat_seen * sigma_hat_seen;
        assert!((sigma_hat_seen - (1.0 + gamma) * sigma).abs() < 1e-15);
        let tol = 5.0 * expect * (1.0 / n as f64).sqrt();
        assert!((var - expect).abs() < tol, "var {var} vs {expect}");
    }

    #[test]
    fn stochastic_ddim_covers_modes_on_oracle() {
        // Reduced-size version of the coverage acceptance run.
        let spec = GmmSpec::default_nine();
        let oracle = OracleDenoiser { spec: spec.clone() };
        let sched = ScheduleSpec::with_steps(1000);
        let n = 4000;
        let samples = ddim_sample(&oracle, &sched, DdimMode::Stochastic, n, 31).unwrap();
        let f3 = h_vicinity(&spec, &samples, 3.0).unwrap();
        assert!(f3 >= 0.97, "h=3 coverage {f3}");
    }

    #[test]
    fn churn_clamps_inflated_levels_to_sigma_max() {
        // S_max above sigma_max forces sigma~ = (1+gamma) sigma past the
        // schedule ceiling; evaluation clamps but the update still uses the
        // true inflated level, and everything stays finite.
        let spec = GmmSpec::default_nine();
        let oracle = OracleDenoiser { spec: spec.clone() };
        let sched = ScheduleSpec::with_steps(20);
        let churn = ChurnSpec {
            s_churn: 100.0,
            s_min: 0.0,
            s_max: 200.0,
            s_noise: 1.0,
        };
        let out = churn_sample(&oracle, &sched, &churn, 16, 77).unwrap();
        assert_eq!(out.len(), 16);
        assert!(out.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn churn_covers_modes_on_oracle() {
        let spec = GmmSpec::default_nine();
        let oracle = OracleDenoiser { spec: spec.clone() };
        let sched = ScheduleSpec::with_steps(100);
        let churn = ChurnSpec::default();
        let n = 4000;
        let samples = churn_sample(&oracle, &sched, &churn, n, 37).unwrap();
        let f4 = h_vicinity(&spec, &samples, 4.0).unwrap();
        assert!(f4 >= 0.995, "h=4 coverage {f4}");
    }
}
