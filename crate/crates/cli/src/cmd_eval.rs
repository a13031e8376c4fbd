//! `eval` and `oracle-info`: mode-coverage tables, Jacobian-Frobenius
//! complexity reports and gradient-variance reports, written as CSVs.

use std::path::PathBuf;

use dp_diffusion::checkpoint::Checkpoint;
use dp_diffusion::dm::DmConfig;
use dp_diffusion::error::Error;
use dp_diffusion::gmm::{
    analytic_score, h_vicinity, ideal_denoiser, log_perturbed_density, perturbed_density,
    sample_data, GmmSpec,
};
use dp_diffusion::metrics::{
    endtoend_jacobian_frobenius, fd_jacobian, gradient_variance_experiment,
    jacobian_frobenius_denoiser, ComplexityReport, SamplerKind,
};
use dp_diffusion::net::{denoiser_input_jacobian, DenoiserParams};
use dp_diffusion::samplers::{
    churn_sample, ddim_sample, ChurnSpec, DdimMode, Denoiser, ModelDenoiser, OracleDenoiser,
    ScheduleSpec,
};
use dp_diffusion::{fmt_f64, Point2, Result};

use crate::common::{read_checkpoint, write_file};
use crate::MetricArg;

pub struct Args {
    pub metric: MetricArg,
    pub checkpoint: Option<PathBuf>,
    pub oracle: bool,
    pub samples: Option<usize>,
    pub sampler: SamplerKind,
    pub m: Option<usize>,
    pub sigmas: Vec<f64>,
    pub mc: usize,
    pub no_endtoend: bool,
    pub k_list: Vec<usize>,
    pub reseeds: usize,
    pub seed: u64,
    pub out: PathBuf,
}

enum Source {
    Data,
    Oracle,
    Model(Box<Checkpoint>),
}

fn source(args: &Args) -> Result<Source> {
    if args.oracle {
        Ok(Source::Oracle)
    } else if let Some(path) = &args.checkpoint {
        Ok(Source::Model(Box::new(read_checkpoint(path)?)))
    } else {
        Ok(Source::Data)
    }
}

pub fn run(args: Args) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    match args.metric {
        MetricArg::Vicinity => vicinity(&args),
        MetricArg::Complexity => complexity(&args),
        MetricArg::Variance => variance(&args),
    }
}

fn draw_with_sampler(d: &impl Denoiser, args: &Args, n: usize) -> Result<Vec<Point2>> {
    let default_m = match args.sampler {
        SamplerKind::DdimDet => 50,
        SamplerKind::DdimStoch => 1000,
        SamplerKind::Churn => 100,
    };
    let schedule = ScheduleSpec::with_steps(args.m.unwrap_or(default_m));
    match args.sampler {
        SamplerKind::DdimDet => ddim_sample(d, &schedule, DdimMode::Deterministic, n, args.seed),
        SamplerKind::DdimStoch => ddim_sample(d, &schedule, DdimMode::Stochastic, n, args.seed),
        SamplerKind::Churn => churn_sample(d, &schedule, &ChurnSpec::default(), n, args.seed),
    }
}

/// Coverage of the nine modes for h = 1..6, mirroring the toy-metric table.
fn vicinity(args: &Args) -> Result<()> {
    let gmm = GmmSpec::default_nine();
    let n = args.samples.unwrap_or(1_000_000);
    let (points, source_name) = match source(args)? {
        Source::Data => (
            sample_data(&gmm, n, args.seed)
                .into_iter()
                .map(|s| s.point)
                .collect::<Vec<_>>(),
            "data",
        ),
        Source::Oracle => {
            let oracle = OracleDenoiser { spec: gmm.clone() };
            (draw_with_sampler(&oracle, args, n)?, "oracle")
        }
        Source::Model(ckpt) => {
            let params = ckpt.ema_params()?;
            let cfg = DmConfig::from_kind(ckpt.dm_kind);
            let model = ModelDenoiser {
                params: &params,
                cfg: &cfg,
                label: None,
            };
            (draw_with_sampler(&model, args, n)?, "model")
        }
    };
    let mut csv = String::from("h,fraction\n");
    println!("h-vicinity coverage ({source_name}, n = {n}):");
    for h in 1..=6 {
        let f = h_vicinity(&gmm, &points, h as f64)?;
        println!("  h = {h}: {:.4}", f);
        csv.push_str(&format!("{h},{}\n", fmt_f64(f)));
    }
    let path = args.out.join("vicinity.csv");
    write_file(&path, &csv)?;
    println!("written to {}", path.display());
    Ok(())
}

fn complexity(args: &Args) -> Result<()> {
    let gmm = GmmSpec::default_nine();
    let sigmas: Vec<f64> = if args.sigmas.is_empty() {
        vec![0.005, 0.02, 0.1, 0.5, 1.0, 2.0, 5.0]
    } else {
        args.sigmas.clone()
    };
    let endtoend_m = args.m.unwrap_or(100);
    let report = match source(args)? {
        Source::Data => {
            return Err(Error::InvalidArgument(
                "complexity needs --oracle or --checkpoint".into(),
            ))
        }
        Source::Oracle => {
            let oracle = OracleDenoiser { spec: gmm.clone() };
            let jac = |x: Point2, s: f64| fd_jacobian(&oracle, x, s, 1e-4);
            let per_sigma = sigmas
                .iter()
                .map(|&s| {
                    let (jf, se) = jacobian_frobenius_denoiser(&jac, &gmm, s, args.mc, args.seed)?;
                    Ok((s, jf, se))
                })
                .collect::<Result<Vec<_>>>()?;
            let end_to_end = if args.no_endtoend {
                None
            } else {
                Some(endtoend_jacobian_frobenius(
                    SamplerKind::DdimDet,
                    &oracle,
                    &ScheduleSpec::with_steps(endtoend_m),
                    args.mc,
                    args.seed,
                )?)
            };
            ComplexityReport {
                per_sigma,
                end_to_end,
            }
        }
        Source::Model(ckpt) => {
            let params = ckpt.ema_params()?;
            let cfg = DmConfig::from_kind(ckpt.dm_kind);
            let jac = |x: Point2, s: f64| {
                denoiser_input_jacobian(&params, &cfg, x, s, None)
                    .expect("sigma > 0 on the complexity grid")
            };
            let per_sigma = sigmas
                .iter()
                .map(|&s| {
                    let (jf, se) = jacobian_frobenius_denoiser(&jac, &gmm, s, args.mc, args.seed)?;
                    Ok((s, jf, se))
                })
                .collect::<Result<Vec<_>>>()?;
            let end_to_end = if args.no_endtoend {
                None
            } else {
                let model = ModelDenoiser {
                    params: &params,
                    cfg: &cfg,
                    label: None,
                };
                Some(endtoend_jacobian_frobenius(
                    SamplerKind::DdimDet,
                    &model,
                    &ScheduleSpec::with_steps(endtoend_m),
                    args.mc,
                    args.seed,
                )?)
            };
            ComplexityReport {
                per_sigma,
                end_to_end,
            }
        }
    };
    for &(s, jf, se) in &report.per_sigma {
        println!("J_F(sigma = {s}) = {jf:.6} +- {se:.6}");
    }
    if let Some((jf, se)) = report.end_to_end {
        println!("end-to-end DDIM-{endtoend_m} J_F = {jf:.4} +- {se:.4}");
    }
    let path = args.out.join("complexity.csv");
    write_file(&path, &report.to_csv())?;
    println!("written to {}", path.display());
    Ok(())
}

fn variance(args: &Args) -> Result<()> {
    let gmm = GmmSpec::default_nine();
    let k_list: Vec<usize> = if args.k_list.is_empty() {
        vec![1, 2, 4, 8, 16, 32]
    } else {
        args.k_list.clone()
    };
    let (params, cfg) = match source(args)? {
        Source::Model(ckpt) => (ckpt.ema_params()?, DmConfig::from_kind(ckpt.dm_kind)),
        // Without a checkpoint the experiment runs on a freshly initialized
        // network; the 1/K law does not depend on the weights.
        _ => (
            DenoiserParams::init(dp_diffusion::net::NetSpec::toy_default(), args.seed),
            DmConfig::edm(),
        ),
    };
    let sample = sample_data(&gmm, 1, args.seed)[0];
    let report =
        gradient_variance_experiment(&params, &cfg, &sample, &k_list, args.reseeds, args.seed)?;
    let mut logs = Vec::new();
    for row in &report.rows {
        println!(
            "K = {}: mean per-parameter gradient variance = {:.3e}",
            row.k, row.mean_grad_variance
        );
        logs.push(((row.k as f64).ln(), row.mean_grad_variance.ln()));
    }
    if logs.len() >= 2 {
        let n = logs.len() as f64;
        let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
        let slope = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
        println!("log-log slope of variance vs K = {slope:.3} (theory: -1)");
    }
    let summary = args.out.join("variance_summary.csv");
    write_file(&summary, &report.summary_csv())?;
    let hist = args.out.join("variance_hist.csv");
    write_file(&hist, &report.histogram_csv())?;
    println!("written to {} and {}", summary.display(), hist.display());
    Ok(())
}

pub fn oracle_info(x: Option<Vec<f64>>, sigma: f64) -> Result<()> {
    let gmm = GmmSpec::default_nine();
    println!("nine-mode Gaussian mixture:");
    println!("  component std = {}", gmm.component_std);
    for (i, (m, w)) in gmm.means.iter().zip(&gmm.weights).enumerate() {
        println!(
            "  mode {i}: mean = ({:+.6}, {:+.6}), weight = {:.6}",
            m.x, m.y, w
        );
    }
    let mut min_d = f64::INFINITY;
    for i in 0..gmm.means.len() {
        for j in 0..i {
            min_d = min_d.min(gmm.means[i].sub(gmm.means[j]).norm());
        }
    }
    println!(
        "  minimum mode separation = {:.4} ({:.1} component stds)",
        min_d,
        min_d / gmm.component_std
    );
    println!("  exact h-vicinity mass of data, 1 - exp(-h^2/2):");
    for h in 1..=6 {
        let p = 1.0 - (-(h as f64) * (h as f64) / 2.0).exp();
        println!("    h = {h}: {p:.6}");
    }
    if let Some(coords) = x {
        if coords.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "--x takes exactly two coordinates, got {}",
                coords.len()
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "--sigma must be >= 0, got {sigma}"
            )));
        }
        let p = Point2::new(coords[0], coords[1]);
        let score = analytic_score(&gmm, p, sigma);
        let den = ideal_denoiser(&gmm, p, sigma);
        println!("at x = ({}, {}), sigma = {sigma}:", p.x, p.y);
        println!(
            "  perturbed density     = {}",
            fmt_f64(perturbed_density(&gmm, p, sigma))
        );
        println!(
            "  log perturbed density = {}",
            fmt_f64(log_perturbed_density(&gmm, p, sigma))
        );
        println!(
            "  score                 = ({}, {})",
            fmt_f64(score.x),
            fmt_f64(score.y)
        );
        println!(
            "  ideal denoiser        = ({}, {})",
            fmt_f64(den.x),
            fmt_f64(den.y)
        );
    }
    Ok(())
}
