//! `sample`: draw points from a trained checkpoint or the analytic oracle
//! with any of the three solvers, optionally under classifier-free guidance.

use std::path::PathBuf;

use dp_diffusion::error::Error;
use dp_diffusion::gmm::GmmSpec;
use dp_diffusion::metrics::SamplerKind;
use dp_diffusion::net::DenoiserParams;
use dp_diffusion::samplers::{
    churn_sample, ddim_sample, ChurnSpec, DdimMode, Denoiser, GuidedDenoiser, ModelDenoiser,
    OracleDenoiser, ScheduleSpec,
};
use dp_diffusion::{Point2, Result};

use crate::common::{load_gmm, read_checkpoint, samples_csv, write_file};
use crate::svg::scatter_svg;

pub struct Args {
    pub checkpoint: Option<PathBuf>,
    pub oracle: bool,
    pub oracle_spec: Option<PathBuf>,
    pub sampler: SamplerKind,
    pub m: Option<usize>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n: usize,
    pub seed: u64,
    pub churn: ChurnSpec,
    pub guidance_w: f64,
    pub label: Option<usize>,
    pub raw_weights: bool,
    pub out: PathBuf,
    pub svg: Option<PathBuf>,
}

fn default_steps(kind: SamplerKind) -> usize {
    match kind {
        SamplerKind::DdimDet => 50,
        SamplerKind::DdimStoch | SamplerKind::Churn => 1000,
    }
}

fn run_sampler(d: &impl Denoiser, args: &Args, schedule: &ScheduleSpec) -> Result<Vec<Point2>> {
    match args.sampler {
        SamplerKind::DdimDet => {
            ddim_sample(d, schedule, DdimMode::Deterministic, args.n, args.seed)
        }
        SamplerKind::DdimStoch => ddim_sample(d, schedule, DdimMode::Stochastic, args.n, args.seed),
        SamplerKind::Churn => churn_sample(d, schedule, &args.churn, args.n, args.seed),
    }
}

/// The conditional oracle denoiser for class k is the posterior mean of
/// that component alone.
fn conditional_oracle(spec: &GmmSpec, label: usize) -> Result<OracleDenoiser> {
    if label >= spec.num_components() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} components",
            spec.num_components()
        )));
    }
    Ok(OracleDenoiser {
        spec: GmmSpec::single(spec.means[label], spec.component_std)?,
    })
}

pub fn run(args: Args) -> Result<()> {
    if args.n == 0 {
        return Err(Error::InvalidArgument("--n must be at least 1".into()));
    }
    let schedule = ScheduleSpec {
        steps_m: args.m.unwrap_or_else(|| default_steps(args.sampler)),
        sigma_min: args.sigma_min,
        sigma_max: args.sigma_max,
        rho: args.rho,
    };

    let points = if args.oracle {
        let spec = load_gmm(args.oracle_spec.as_deref())?;
        match (args.label, args.guidance_w) {
            (None, _) => run_sampler(&OracleDenoiser { spec }, &args, &schedule)?,
            (Some(label), w) => {
                let cond = conditional_oracle(&spec, label)?;
                let uncond = OracleDenoiser { spec };
                let guided = GuidedDenoiser {
                    cond,
                    uncond,
                    scale_w: w,
                };
                run_sampler(&guided, &args, &schedule)?
            }
        }
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("provide --checkpoint or --oracle".into()))?;
        let ckpt = read_checkpoint(path)?;
        let params: DenoiserParams = if args.raw_weights {
            ckpt.params()?
        } else {
            ckpt.ema_params()?
        };
        let cfg = dp_diffusion::dm::DmConfig::from_kind(ckpt.dm_kind);
        match args.label {
            Some(label) => {
                if label >= params.spec.num_classes {
                    return Err(Error::InvalidArgument(format!(
                        "label {label} out of range for {} classes",
                        params.spec.num_classes
                    )));
                }
                let guided = GuidedDenoiser {
                    cond: ModelDenoiser {
                        params: &params,
                        cfg: &cfg,
                        label: Some(label),
                    },
                    uncond: ModelDenoiser {
                        params: &params,
                        cfg: &cfg,
                        label: None,
                    },
                    scale_w: args.guidance_w,
                };
                run_sampler(&guided, &args, &schedule)?
            }
            None => {
                let d = ModelDenoiser {
                    params: &params,
                    cfg: &cfg,
                    label: None,
                };
                run_sampler(&d, &args, &schedule)?
            }
        }
    };

    write_file(&args.out, &samples_csv(&points, args.label))?;
    println!("wrote {} samples to {}", points.len(), args.out.display());
    if let Some(svg_path) = &args.svg {
        write_file(svg_path, &scatter_svg(&points))?;
        println!("scatter plot written to {}", svg_path.display());
    }
    Ok(())
}
