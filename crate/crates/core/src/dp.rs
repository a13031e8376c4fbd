//! The privacy-critical training loop: Poisson subsampling, per-sample
//! clipping, Gaussian sanitization of the averaged gradient, Adam on the
//! sanitized gradient, and an EMA of the parameters.
//!
//! The sanitized release is
//! `G~ = (1/B) sum_i clip_C(grad_i) + (C/B) z, z ~ N(0, sigma_DP^2 I)`,
//! where B is the EXPECTED batch size; dividing by the realized size would
//! change the sensitivity C/B. Empty Poisson batches still perform a full
//! step (noise-only gradient, Adam update, EMA) and count towards
//! composition. Adam's moments see only sanitized gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dm::DmConfig;
use crate::error::{Error, Result};
use crate::gmm::LabeledSample;
use crate::net::{
    per_sample_loss_and_grads_into, BatchContext, DenoiserParams, EmaParams, IndexedSample,
    NetSpec, PerSampleGrads,
};
use crate::rng::{domain, stream};

/// Parameters of the Gaussian mechanism and its schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    /// Clipping constant C; `f64::INFINITY` disables clipping (requires
    /// sigma_dp == 0, the non-private sentinel).
    pub clip_c: f64,
    /// Noise multiplier sigma_DP (relative to sensitivity C/B).
    pub sigma_dp: f64,
    /// Poisson inclusion probability q = B/N.
    pub subsample_q: f64,
    /// Number of composition steps T.
    pub total_steps: usize,
    /// DP delta, used by the accountant.
    pub delta: f64,
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_c > 0.0) {
            return Err(Error::Config(format!(
                "clip_c must be positive, got {}",
                self.clip_c
            )));
        }
        if !(self.sigma_dp >= 0.0) || !self.sigma_dp.is_finite() {
            return Err(Error::Config(format!(
                "sigma_dp must be >= 0, got {}",
                self.sigma_dp
            )));
        }
        if self.clip_c.is_infinite() && self.sigma_dp != 0.0 {
            return Err(Error::Config(
                "clip_c = inf is the non-private sentinel and requires sigma_dp = 0".into(),
            ));
        }
        if !(self.subsample_q > 0.0 && self.subsample_q <= 1.0) {
            return Err(Error::Config(format!(
                "subsample_q must be in (0, 1], got {}",
                self.subsample_q
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must be in (0, 1), got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Adam settings; the moments are driven exclusively by sanitized gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSpec {
    fn default() -> Self {
        AdamSpec {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// The released sanitized gradient, plus the pre-clip row norms as
/// training diagnostics (they never leave the process).
#[derive(Debug, Clone)]
pub struct SanitizedGradient {
    pub grad: Vec<f64>,
    pub actual_batch_size: usize,
    pub pre_clip_norms: Vec<f64>,
}

/// Composition steps for an epoch-based schedule: T = epochs * round(1/q).
pub fn steps_for_epochs(epochs: usize, q: f64) -> usize {
    epochs * (1.0 / q).round() as usize
}

/// Poisson subsampling: each index enters independently with probability q.
/// Implemented with geometric gap sampling so the cost is O(qN), not O(N).
pub fn poisson_sample(n: usize, q: f64, seed: u64, step: u64) -> Vec<usize> {
    debug_assert!((0.0..=1.0).contains(&q));
    if q <= 0.0 || n == 0 {
        return Vec::new();
    }
    if q >= 1.0 {
        return (0..n).collect();
    }
    let mut rng = stream(seed, &[domain::POISSON, step]);
    let log1mq = (1.0 - q).ln();
    let mut out = Vec::with_capacity((q * n as f64 * 1.5) as usize + 4);
    // Gap to the next success of a Bernoulli(q) sequence: floor(ln U / ln(1-q)).
    let mut i = 0usize;
    loop {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let gap = (u.ln() / log1mq).floor();
        if !gap.is_finite() || gap >= (n - i) as f64 {
            break;
        }
        i += gap as usize;
        out.push(i);
        i += 1;
        if i >= n {
            break;
        }
    }
    out
}

/// clip_C(g) = min(1, C/|g|) g. The factor is taken as 1 when |g| = 0 or
/// C is infinite.
pub fn clip(g: &[f64], c: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, c);
    out
}

fn clip_factor(norm: f64, c: f64) -> f64 {
    if norm > c {
        c / norm
    } else {
        1.0
    }
}

pub fn clip_in_place(g: &mut [f64], c: f64) {
    let norm = l2_norm(g);
    let f = clip_factor(norm, c);
    if f != 1.0 {
        for v in g.iter_mut() {
            *v *= f;
        }
    }
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Clipped row sum over a row range as a fixed-shape binary tree, so the
/// reduction parallelizes while the floating-point addition order stays
/// independent of thread count. Leaves also record the pre-clip norms and
/// assert that every row entering the average has norm <= C.
fn clip_sum_tree(
    data: &[f64],
    dim: usize,
    start: usize,
    norms: &mut [f64],
    clip_c: f64,
) -> Vec<f64> {
    let rows = norms.len();
    if rows <= 16 {
        let mut acc = vec![0.0; dim];
        for (i, norm_slot) in norms.iter_mut().enumerate() {
            let row = &data[(start + i) * dim..(start + i + 1) * dim];
            let norm = l2_norm(row);
            *norm_slot = norm;
            let f = clip_factor(norm, clip_c);
            if clip_c.is_finite() {
                assert!(
                    norm * f <= clip_c * (1.0 + 1e-12),
                    "clipped norm {} > C {clip_c}",
                    norm * f
                );
            }
            if f == 1.0 {
                for (s, g) in acc.iter_mut().zip(row) {
                    *s += g;
                }
            } else {
                for (s, g) in acc.iter_mut().zip(row) {
                    *s += f * g;
                }
            }
        }
        acc
    } else {
        let mid = rows / 2;
        let (left_norms, right_norms) = norms.split_at_mut(mid);
        let (mut left, right) = rayon::join(
            || clip_sum_tree(data, dim, start, left_norms, clip_c),
            || clip_sum_tree(data, dim, start + mid, right_norms, clip_c),
        );
        for (l, r) in left.iter_mut().zip(&right) {
            *l += r;
        }
        left
    }
}

/// Clip rows, average by the EXPECTED batch size and add (C/B) sigma_DP noise.
pub fn sanitize<R: Rng + ?Sized>(
    per_sample: &PerSampleGrads,
    clip_c: f64,
    sigma_dp: f64,
    expected_b: f64,
    rng: &mut R,
) -> Result<SanitizedGradient> {
    if !(expected_b > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "expected batch size must be positive, got {expected_b}"
        )));
    }
    let dim = per_sample.dim();
    let rows = per_sample.rows();
    let mut norms = vec![0.0; rows];
    let mut sum = if rows == 0 {
        vec![0.0; dim]
    } else {
        clip_sum_tree(per_sample.raw_data(), dim, 0, &mut norms, clip_c)
    };
    let inv_b = 1.0 / expected_b;
    for s in sum.iter_mut() {
        *s *= inv_b;
    }
    if sigma_dp > 0.0 {
        let noise_scale = clip_c * inv_b * sigma_dp;
        for s in sum.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *s += noise_scale * z;
        }
    }
    Ok(SanitizedGradient {
        grad: sum,
        actual_batch_size: rows,
        pre_clip_norms: norms,
    })
}

/// One row of the training log CSV.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub loss_mean: f64,
    pub realized_b: usize,
    pub median_grad_norm: f64,
    pub frac_clipped: f64,
}

/// What the accountant must be told about a finished run. Independent of
/// the noise multiplicity K by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingRecord {
    pub sanitize_calls: usize,
    pub clip_c: f64,
    pub sigma_dp: f64,
    pub subsample_q: f64,
}

pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub accounting: AccountingRecord,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,loss_mean,realized_b,median_grad_norm,frac_clipped";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.step,
                crate::fmt_f64(s.loss_mean),
                s.realized_b,
                crate::fmt_f64(s.median_grad_norm),
                crate::fmt_f64(s.frac_clipped),
            ));
        }
        out
    }
}

/// Remaining knobs of the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub noise_multiplicity: usize,
    pub ema_decay: f64,
    /// Probability of replacing an element's label with the null token
    /// (classifier-free guidance training).
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            noise_multiplicity: 1,
            ema_decay: 0.999,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub ema: EmaParams,
    pub log: TrainLog,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamState {
    fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    fn step(&mut self, spec: &AdamSpec, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - spec.beta1.powi(self.t as i32);
        let bc2 = 1.0 - spec.beta2.powi(self.t as i32);
        for ((m, v), (p, &g)) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(theta.iter_mut().zip(grad))
        {
            *m = spec.beta1 * *m + (1.0 - spec.beta1) * g;
            *v = spec.beta2 * *v + (1.0 - spec.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= spec.lr * mhat / (vhat.sqrt() + spec.eps);
        }
    }
}

/// Runs the full DP-SGD training loop for `privacy.total_steps` steps.
///
/// Per step: Poisson sample -> per-sample noise-multiplicity losses and
/// gradients -> clip -> average by expected B -> add (C/B) N(0, sigma_DP^2)
/// -> Adam -> EMA. The log records one row per step.
pub fn train(
    data: &[LabeledSample],
    cfg: &DmConfig,
    net_spec: NetSpec,
    privacy: &PrivacySpec,
    opt: &AdamSpec,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    privacy.validate()?;
    cfg.validate()?;
    net_spec.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training data is empty".into()));
    }
    if opts.noise_multiplicity == 0 {
        return Err(Error::InvalidArgument(
            "noise multiplicity K must be >= 1".into(),
        ));
    }
    let n = data.len();
    let q = privacy.subsample_q;
    let expected_b = q * n as f64;
    let mut params = DenoiserParams::init(net_spec, opts.seed);
    let mut ema = EmaParams::new(&params, opts.ema_decay);
    let mut adam = AdamState::new(params.theta.len());
    let mut steps = Vec::with_capacity(privacy.total_steps);
    let mut sanitize_calls = 0usize;
    let mut grads = PerSampleGrads::zeros(0, 0);

    for step in 0..privacy.total_steps {
        let chosen = poisson_sample(n, q, opts.seed, step as u64);
        let batch: Vec<IndexedSample> = chosen
            .iter()
            .map(|&i| {
                let mut s = data[i];
                if opts.cond_dropout > 0.0 && s.label.is_some() {
                    let mut r = stream(opts.seed, &[domain::LABEL_DROPOUT, step as u64, i as u64]);
                    if r.gen::<f64>() < opts.cond_dropout {
                        s.label = None;
                    }
                }
                IndexedSample {
                    index: i as u64,
                    sample: s,
                }
            })
            .collect();

        let ctx = BatchContext {
            seed: opts.seed,
            step: step as u64,
        };
        let losses = per_sample_loss_and_grads_into(
            &params,
            cfg,
            &batch,
            opts.noise_multiplicity,
            ctx,
            &mut grads,
        )?;

        let mut noise_rng = stream(opts.seed, &[domain::DP_NOISE, step as u64]);
        let sanitized = sanitize(
            &grads,
            privacy.clip_c,
            privacy.sigma_dp,
            expected_b,
            &mut noise_rng,
        )?;
        sanitize_calls += 1;

        let mut norms = sanitized.pre_clip_norms.clone();
        let clipped = norms.iter().filter(|&&nm| nm > privacy.clip_c).count();
        let (median_grad_norm, frac_clipped) = if norms.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = norms.len() / 2;
            let median = if norms.len() % 2 == 1 {
                norms[mid]
            } else {
                0.5 * (norms[mid - 1] + norms[mid])
            };
            (median, clipped as f64 / norms.len() as f64)
        };

        adam.step(opt, &mut params.theta, &sanitized.grad);
        if !params.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite parameters after step {step} (loss mean {:?})",
                losses.iter().sum::<f64>() / losses.len().max(1) as f64
            )));
        }
        ema.update(&params)?;

        let loss_mean = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        steps.push(StepLog {
            step,
            loss_mean,
            realized_b: sanitized.actual_batch_size,
            median_grad_norm,
            frac_clipped,
        });
    }

    Ok(TrainOutcome {
        params,
        ema,
        log: TrainLog {
            steps,
            accounting: AccountingRecord {
                sanitize_calls,
                clip_c: privacy.clip_c,
                sigma_dp: privacy.sigma_dp,
                subsample_q: q,
            },
        },
    })
}
