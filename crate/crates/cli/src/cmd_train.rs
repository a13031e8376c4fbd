//! `train`: accountant pre-check, DP-SGD training, checkpoint + log +
//! manifest output.

use std::path::{Path, PathBuf};

use dp_diffusion::accountant::{calibrate_sigma, epsilon_for, Conversion, DpBudget};
use dp_diffusion::checkpoint::Checkpoint;
use dp_diffusion::dp::{train, TrainOptions};
use dp_diffusion::error::Error;
use dp_diffusion::experiment::{
    ExperimentConfig, FileRef, ManifestOutputs, ManifestPrivacy, ResolvedExperiment, RunManifest,
};
use dp_diffusion::gmm::sample_data;
use dp_diffusion::Result;

use crate::common::sha256_hex;

pub const OUTPUT_ROOT_ENV: &str = "DP_DIFFUSION_OUT";

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Calibrates sigma if requested and returns (sigma, epsilon, best alpha)
/// for DP runs, or None for non-private runs.
fn accountant_precheck(resolved: &mut ResolvedExperiment) -> Result<Option<(f64, f64, f64)>> {
    if !resolved.dp_enabled {
        println!("privacy: non-private run (no clipping, no noise)");
        return Ok(None);
    }
    let p = &mut resolved.privacy;
    if p.sigma_dp.is_nan() {
        let target = DpBudget {
            epsilon: resolved
                .target_epsilon
                .expect("resolver guarantees a target"),
            delta: p.delta,
        };
        p.sigma_dp = calibrate_sigma(
            &target,
            p.subsample_q,
            p.total_steps,
            1e-4,
            Conversion::Refined,
        )
        .map_err(|e| {
            Error::Config(format!(
                "privacy target epsilon = {} infeasible: {e}",
                target.epsilon
            ))
        })?;
        println!(
            "calibrated sigma_dp = {:.6} for target epsilon = {}",
            p.sigma_dp, target.epsilon
        );
    }
    p.validate()?;
    let (budget, alpha) = epsilon_for(
        p.sigma_dp,
        p.subsample_q,
        p.total_steps,
        p.delta,
        Conversion::Refined,
    )?;
    println!(
        "privacy pre-check: epsilon = {:.4} (delta = {}, alpha = {alpha}, sigma_dp = {}, q = {:.6}, T = {})",
        budget.epsilon, p.delta, p.sigma_dp, p.subsample_q, p.total_steps
    );
    Ok(Some((p.sigma_dp, budget.epsilon, alpha)))
}

pub fn run(config_path: &Path) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let mut resolved = config.resolve(&output_root())?;

    // Accountant pre-check happens before anything is written; an
    // infeasible target aborts here.
    let precheck = accountant_precheck(&mut resolved)?;

    std::fs::create_dir_all(&resolved.output_dir)?;
    println!(
        "training: {:?} config, {} params, N = {}, q = {:.6}, T = {}, K = {}",
        resolved.dm.kind(),
        resolved.net.param_count(),
        resolved.dataset_size,
        resolved.privacy.subsample_q,
        resolved.privacy.total_steps,
        resolved.noise_multiplicity
    );

    let data = sample_data(&resolved.gmm, resolved.dataset_size, resolved.seed);
    let opts = TrainOptions {
        noise_multiplicity: resolved.noise_multiplicity,
        ema_decay: resolved.ema_decay,
        cond_dropout: resolved.cond_dropout,
        seed: resolved.seed,
    };
    let outcome = train(
        &data,
        &resolved.dm,
        resolved.net,
        &resolved.privacy,
        &resolved.optimizer,
        &opts,
    )?;

    // Post-run accounting must agree exactly with the pre-check.
    let acct = &outcome.log.accounting;
    if acct.sanitize_calls != resolved.privacy.total_steps {
        return Err(Error::Numerical(format!(
            "executed {} sanitize calls but accounted for {}",
            acct.sanitize_calls, resolved.privacy.total_steps
        )));
    }

    let ckpt_path = resolved.output_dir.join("model.ckpt");
    let ckpt = Checkpoint::from_training(&outcome.params, &outcome.ema, resolved.dm.kind());
    let ckpt_bytes = ckpt.to_bytes();
    dp_diffusion::checkpoint::atomic_write(&ckpt_path, &ckpt_bytes)?;

    let log_path = resolved.output_dir.join("training_log.csv");
    let log_csv = outcome.log.to_csv();
    dp_diffusion::checkpoint::atomic_write(&log_path, log_csv.as_bytes())?;

    let privacy = match precheck {
        Some((sigma, epsilon, alpha)) => ManifestPrivacy {
            mode: "dp".into(),
            clip_c: Some(resolved.privacy.clip_c),
            sigma_dp: sigma,
            subsample_q: resolved.privacy.subsample_q,
            accounted_steps: resolved.privacy.total_steps,
            executed_steps: acct.sanitize_calls,
            epsilon: Some(epsilon),
            delta: Some(resolved.privacy.delta),
            best_alpha: Some(alpha),
        },
        None => ManifestPrivacy {
            mode: "non-private".into(),
            clip_c: None,
            sigma_dp: 0.0,
            subsample_q: resolved.privacy.subsample_q,
            accounted_steps: resolved.privacy.total_steps,
            executed_steps: acct.sanitize_calls,
            epsilon: None,
            delta: None,
            best_alpha: None,
        },
    };

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: resolved.seed,
        config,
        privacy,
        outputs: ManifestOutputs {
            checkpoint: FileRef {
                path: ckpt_path.display().to_string(),
                sha256: sha256_hex(&ckpt_bytes),
            },
            training_log: FileRef {
                path: log_path.display().to_string(),
                sha256: sha256_hex(log_csv.as_bytes()),
            },
            metrics: vec![],
        },
    };
    let manifest_path = resolved.output_dir.join("manifest.json");
    manifest.write(&manifest_path)?;

    let last = outcome.log.steps.last();
    println!(
        "done: final loss mean = {}, checkpoint = {}, manifest = {}",
        last.map(|s| format!("{:.6}", s.loss_mean))
            .unwrap_or_else(|| "n/a".into()),
        ckpt_path.display(),
        manifest_path.display()
    );
    match precheck {
        Some((_, epsilon, _)) => println!("privacy spent: epsilon = {epsilon:.4}"),
        None => println!("privacy spent: non-private"),
    }
    Ok(())
}
