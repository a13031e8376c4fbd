//! Quantitative evaluation: Jacobian-Frobenius complexity of denoisers and
//! of end-to-end deterministic sampling maps, plus noise-multiplicity
//! variance measurements of the training loss and its parameter gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dm::DmConfig;
use crate::error::{Error, Result};
use crate::gmm::{sample_data, GmmSpec, LabeledSample, Point2};
use crate::net::{per_sample_loss_and_grads, BatchContext, DenoiserParams, IndexedSample};
use crate::rng::{domain, stream};
use crate::samplers::{ddim_run_deterministic, Denoiser, ScheduleSpec};

pub type Mat2 = [[f64; 2]; 2];

/// Squared Frobenius norm.
pub fn frob2(m: &Mat2) -> f64 {
    m[0][0] * m[0][0] + m[0][1] * m[0][1] + m[1][0] * m[1][0] + m[1][1] * m[1][1]
}

/// Central-difference Jacobian of a denoiser at fixed sigma. Row i holds
/// dD_i/dx_j. The step is relative to the input magnitude.
pub fn fd_jacobian(d: &impl Denoiser, x: Point2, sigma: f64, rel_step: f64) -> Mat2 {
    let hx = rel_step * x.x.abs().max(1.0);
    let hy = rel_step * x.y.abs().max(1.0);
    let px = d.denoise(Point2::new(x.x + hx, x.y), sigma);
    let mx = d.denoise(Point2::new(x.x - hx, x.y), sigma);
    let py = d.denoise(Point2::new(x.x, x.y + hy), sigma);
    let my = d.denoise(Point2::new(x.x, x.y - hy), sigma);
    [
        [(px.x - mx.x) / (2.0 * hx), (py.x - my.x) / (2.0 * hy)],
        [(px.y - mx.y) / (2.0 * hx), (py.y - my.y) / (2.0 * hy)],
    ]
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo estimate of J_F(sigma) = E_{x ~ p(x; sigma)} |grad_x D(x, sigma)|_F^2
/// for an arbitrary Jacobian routine (exact reverse-mode for networks,
/// finite differences for oracles).
pub fn jacobian_frobenius_denoiser<J>(
    jac: &J,
    spec: &GmmSpec,
    sigma: f64,
    n_mc: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    J: Fn(Point2, f64) -> Mat2 + Sync,
{
    if n_mc < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 Monte-Carlo points".into(),
        ));
    }
    let clean = sample_data(spec, n_mc, seed);
    let values: Vec<f64> = clean
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream(seed, &[domain::METRIC, i as u64]);
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let x = s.point.add(Point2::new(z1, z2).scale(sigma));
            frob2(&jac(x, sigma))
        })
        .collect();
    Ok(mean_stderr(&values))
}

/// Monte-Carlo estimate of E_{z ~ N(0, I)} |grad_z S(z)|_F^2 for a
/// deterministic map S via central finite differences per input coordinate.
/// Sampler maps should include their own latent scaling (z -> S(sigma_max z)).
pub fn jacobian_frobenius_endtoend<S>(
    map: &S,
    n_mc: usize,
    seed: u64,
    rel_step: f64,
) -> Result<(f64, f64)>
where
    S: Fn(Point2) -> Point2 + Sync,
{
    if n_mc < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 Monte-Carlo points".into(),
        ));
    }
    let values: Vec<f64> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[domain::METRIC, i as u64]);
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let z = Point2::new(z1, z2);
            let hx = rel_step * z.x.abs().max(1.0);
            let hy = rel_step * z.y.abs().max(1.0);
            let px = map(Point2::new(z.x + hx, z.y));
            let mx = map(Point2::new(z.x - hx, z.y));
            let py = map(Point2::new(z.x, z.y + hy));
            let my = map(Point2::new(z.x, z.y - hy));
            let j: Mat2 = [
                [(px.x - mx.x) / (2.0 * hx), (py.x - my.x) / (2.0 * hy)],
                [(px.y - mx.y) / (2.0 * hx), (py.y - my.y) / (2.0 * hy)],
            ];
            frob2(&j)
        })
        .collect();
    Ok(mean_stderr(&values))
}

/// Which solver a CLI request refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    DdimDet,
    DdimStoch,
    Churn,
}

/// End-to-end complexity of a sampler map. Only the deterministic DDIM
/// defines a Jacobian; stochastic samplers are rejected.
pub fn endtoend_jacobian_frobenius(
    kind: SamplerKind,
    d: &impl Denoiser,
    schedule: &ScheduleSpec,
    n_mc: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if kind != SamplerKind::DdimDet {
        return Err(Error::InvalidArgument(
            "end-to-end Jacobian is undefined for stochastic samplers".into(),
        ));
    }
    let sigmas = schedule.sigmas()?;
    let sigma_max = schedule.sigma_max;
    let map = move |z: Point2| ddim_run_deterministic(d, &sigmas, z.scale(sigma_max));
    jacobian_frobenius_endtoend(&map, n_mc, seed, 1e-4)
}

/// Per-sigma complexity rows plus the optional end-to-end scalar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub per_sigma: Vec<(f64, f64, f64)>,
    pub end_to_end: Option<(f64, f64)>,
}

impl ComplexityReport {
    pub const CSV_HEADER: &'static str = "sigma,jf,stderr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for &(sigma, jf, se) in &self.per_sigma {
            out.push_str(&format!(
                "{},{},{}\n",
                crate::fmt_f64(sigma),
                crate::fmt_f64(jf),
                crate::fmt_f64(se)
            ));
        }
        if let Some((jf, se)) = self.end_to_end {
            out.push_str(&format!(
                "end_to_end,{},{}\n",
                crate::fmt_f64(jf),
                crate::fmt_f64(se)
            ));
        }
        out
    }
}

/// Gradient-variance statistics at one noise multiplicity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceRow {
    pub k: usize,
    pub mean_grad_variance: f64,
    pub hist_edges: Vec<f64>,
    pub hist_counts: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub rows: Vec<VarianceRow>,
}

impl VarianceReport {
    pub const SUMMARY_HEADER: &'static str = "k,mean_grad_variance";
    pub const HIST_HEADER: &'static str = "k,bin_lo,bin_hi,count";

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(Self::SUMMARY_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{}\n",
                r.k,
                crate::fmt_f64(r.mean_grad_variance)
            ));
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from(Self::HIST_HEADER);
        out.push('\n');
        for r in &self.rows {
            for (i, &c) in r.hist_counts.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    r.k,
                    crate::fmt_f64(r.hist_edges[i]),
                    crate::fmt_f64(r.hist_edges[i + 1]),
                    c
                ));
            }
        }
        out
    }
}

const HIST_BINS: usize = 50;

/// Logarithmic histogram over the positive values.
fn log_histogram(values: &[f64]) -> (Vec<f64>, Vec<u64>) {
    let positive: Vec<f64> = values.iter().copied().filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let lo = positive.iter().cloned().fold(f64::INFINITY, f64::min).ln();
    let hi = positive
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .ln();
    let span = (hi - lo).max(1e-12);
    let mut edges = Vec::with_capacity(HIST_BINS + 1);
    for i in 0..=HIST_BINS {
        edges.push((lo + span * i as f64 / HIST_BINS as f64).exp());
    }
    let mut counts = vec![0u64; HIST_BINS];
    for &v in &positive {
        let mut bin = (((v.ln() - lo) / span) * HIST_BINS as f64) as usize;
        if bin >= HIST_BINS {
            bin = HIST_BINS - 1;
        }
        counts[bin] += 1;
    }
    (edges, counts)
}

/// Resamples the (sigma, n) draws of one element `n_reseeds` times per K and
/// reports the per-parameter gradient variance (mean over parameters plus
/// a log-binned histogram).
pub fn gradient_variance_experiment(
    params: &DenoiserParams,
    cfg: &DmConfig,
    sample: &LabeledSample,
    k_list: &[usize],
    n_reseeds: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if n_reseeds < 2 {
        return Err(Error::InvalidArgument(
            "variance needs at least 2 reseeds".into(),
        ));
    }
    if k_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "K values must be strictly increasing".into(),
        ));
    }
    let dim = params.spec.param_count();
    let item = IndexedSample {
        index: 0,
        sample: *sample,
    };
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let mut sum = vec![0.0; dim];
        let mut sumsq = vec![0.0; dim];
        for r in 0..n_reseeds {
            let ctx = BatchContext {
                seed,
                step: r as u64,
            };
            let (_, grads) = per_sample_loss_and_grads(params, cfg, &[item], k, ctx)?;
            for ((s, s2), &g) in sum.iter_mut().zip(sumsq.iter_mut()).zip(grads.row(0)) {
                *s += g;
                *s2 += g * g;
            }
        }
        let n = n_reseeds as f64;
        let variances: Vec<f64> = sum
            .iter()
            .zip(&sumsq)
            .map(|(&s, &s2)| ((s2 - s * s / n) / (n - 1.0)).max(0.0))
            .collect();
        let mean = variances.iter().sum::<f64>() / dim as f64;
        let (hist_edges, hist_counts) = log_histogram(&variances);
        rows.push(VarianceRow {
            k,
            mean_grad_variance: mean,
            hist_edges,
            hist_counts,
        });
    }
    Ok(VarianceReport { rows })
}

/// Sample variance of the noise-multiplicity loss under reseeding.
pub fn loss_variance(
    params: &DenoiserParams,
    cfg: &DmConfig,
    sample: &LabeledSample,
    k: usize,
    n_reseeds: usize,
    seed: u64,
) -> Result<f64> {
    if n_reseeds < 2 {
        return Err(Error::InvalidArgument(
            "variance is undefined for fewer than 2 reseeds".into(),
        ));
    }
    let item = IndexedSample {
        index: 0,
        sample: *sample,
    };
    let losses: Result<Vec<f64>> = (0..n_reseeds)
        .into_par_iter()
        .map(|r| {
            let ctx = BatchContext {
                seed,
                step: r as u64,
            };
            let (l, _) = per_sample_loss_and_grads(params, cfg, &[item], k, ctx)?;
            Ok(l[0])
        })
        .collect();
    let losses = losses?;
    let n = n_reseeds as f64;
    let mean = losses.iter().sum::<f64>() / n;
    Ok(losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0))
}
