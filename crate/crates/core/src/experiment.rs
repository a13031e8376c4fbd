//! Experiment configuration (strict JSON schema) and the run manifest.
//!
//! Configs are validated on load: unknown keys are rejected everywhere and
//! every section's invariants are checked before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::atomic_write;
use crate::dm::{DmConfig, DmKind};
use crate::dp::{steps_for_epochs, AdamSpec, PrivacySpec};
use crate::error::{Error, Result};
use crate::gmm::{GmmSpec, Point2};
use crate::net::NetSpec;
use crate::samplers::{ChurnSpec, GuidanceSpec, ScheduleSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub privacy: PrivacySection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSection {
    /// The default nine-mode mixture.
    Default9,
    Custom {
        means: Vec<[f64; 2]>,
        component_std: f64,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub config: DmKind,
    #[serde(default)]
    pub arch: ArchSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub hidden_width: usize,
    pub depth: usize,
    pub fourier_features: usize,
    pub class_embed_dim: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        let toy = NetSpec::toy_default();
        ArchSection {
            hidden_width: toy.hidden_width,
            depth: toy.depth,
            fourier_features: toy.fourier_features,
            class_embed_dim: toy.class_embed_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PrivacySection {
    NonPrivate,
    Dp {
        #[serde(default = "default_clip_c")]
        clip_c: f64,
        /// Explicit noise multiplier; mutually exclusive with target_epsilon.
        #[serde(default)]
        sigma_dp: Option<f64>,
        /// Calibrate sigma_dp to reach this epsilon at delta.
        #[serde(default)]
        target_epsilon: Option<f64>,
        delta: f64,
    },
}

fn default_clip_c() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let a = AdamSpec::default();
        OptimizerSection {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub schedule: ScheduleSection,
    pub churn: ChurnSpec,
    pub guidance: GuidanceSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps_m: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = ScheduleSpec::with_steps(1000);
        ScheduleSection {
            steps_m: s.steps_m,
            sigma_min: s.sigma_min,
            sigma_max: s.sigma_max,
            rho: s.rho,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub dataset_size: usize,
    pub expected_batch: f64,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_multiplicity")]
    pub noise_multiplicity: usize,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_cond_dropout")]
    pub cond_dropout: f64,
    pub output_dir: String,
}

fn default_multiplicity() -> usize {
    1
}

fn default_ema_decay() -> f64 {
    0.999
}

fn default_cond_dropout() -> f64 {
    0.1
}

/// Everything a run needs, with every invariant already checked. When
/// `privacy.sigma_dp` is NaN the noise multiplier still has to be
/// calibrated against `target_epsilon`.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub gmm: GmmSpec,
    pub dm: DmConfig,
    pub net: NetSpec,
    pub privacy: PrivacySpec,
    pub dp_enabled: bool,
    pub target_epsilon: Option<f64>,
    pub optimizer: AdamSpec,
    pub schedule: ScheduleSpec,
    pub churn: ChurnSpec,
    pub guidance: GuidanceSpec,
    pub seed: u64,
    pub dataset_size: usize,
    pub noise_multiplicity: usize,
    pub ema_decay: f64,
    pub cond_dropout: f64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Validates the config and computes the derived quantities (q, T, net
    /// descriptor). `output_root` prefixes relative output directories.
    pub fn resolve(&self, output_root: &Path) -> Result<ResolvedExperiment> {
        let gmm = match &self.data {
            DataSection::Default9 => GmmSpec::default_nine(),
            DataSection::Custom {
                means,
                component_std,
                weights,
            } => GmmSpec::new(
                means.iter().map(|m| Point2::new(m[0], m[1])).collect(),
                *component_std,
                weights.clone(),
            )
            .map_err(|e| Error::Config(format!("data section: {e}")))?,
        };
        let dm = DmConfig::from_kind(self.model.config);
        dm.validate()?;
        let net = NetSpec {
            hidden_width: self.model.arch.hidden_width,
            depth: self.model.arch.depth,
            fourier_features: self.model.arch.fourier_features,
            class_embed_dim: self.model.arch.class_embed_dim,
            num_classes: gmm.num_components(),
        };
        net.validate()?;

        let run = &self.run;
        if run.dataset_size == 0 {
            return Err(Error::Config("run.dataset_size must be positive".into()));
        }
        if !(run.expected_batch > 0.0 && run.expected_batch <= run.dataset_size as f64) {
            return Err(Error::Config(format!(
                "run.expected_batch must be in (0, dataset_size], got {}",
                run.expected_batch
            )));
        }
        let q = run.expected_batch / run.dataset_size as f64;
        let total_steps = match (run.steps, run.epochs) {
            (Some(s), None) => s,
            (None, Some(e)) => steps_for_epochs(e, q),
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "run.steps and run.epochs are mutually exclusive".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "one of run.steps or run.epochs is required".into(),
                ))
            }
        };
        if run.noise_multiplicity == 0 {
            return Err(Error::Config("run.noise_multiplicity must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&run.ema_decay) {
            return Err(Error::Config(format!(
                "run.ema_decay must be in [0, 1], got {}",
                run.ema_decay
            )));
        }
        if !(0.0..=1.0).contains(&run.cond_dropout) {
            return Err(Error::Config(format!(
                "run.cond_dropout must be in [0, 1], got {}",
                run.cond_dropout
            )));
        }

        let (privacy, dp_enabled, target_epsilon) =
            match &self.privacy {
                PrivacySection::NonPrivate => (
                    PrivacySpec {
                        clip_c: f64::INFINITY,
                        sigma_dp: 0.0,
                        subsample_q: q,
                        total_steps,
                        delta: 1e-5,
                    },
                    false,
                    None,
                ),
                PrivacySection::Dp {
                    clip_c,
                    sigma_dp,
                    target_epsilon,
                    delta,
                } => {
                    match (sigma_dp, target_epsilon) {
                        (Some(_), Some(_)) => return Err(Error::Config(
                            "privacy.sigma_dp and privacy.target_epsilon are mutually exclusive"
                                .into(),
                        )),
                        (None, None) => {
                            return Err(Error::Config(
                                "dp mode needs privacy.sigma_dp or privacy.target_epsilon".into(),
                            ))
                        }
                        _ => {}
                    }
                    if let Some(s) = sigma_dp {
                        if !(*s > 0.0) {
                            return Err(Error::Config(format!(
                                "privacy.sigma_dp must be > 0, got {s}"
                            )));
                        }
                    }
                    if let Some(e) = target_epsilon {
                        if !(*e > 0.0) {
                            return Err(Error::Config(format!(
                                "privacy.target_epsilon must be > 0, got {e}"
                            )));
                        }
                    }
                    let spec = PrivacySpec {
                        clip_c: *clip_c,
                        sigma_dp: sigma_dp.unwrap_or(f64::NAN),
                        subsample_q: q,
                        total_steps,
                        delta: *delta,
                    };
                    if sigma_dp.is_some() {
                        spec.validate()?;
                    } else {
                        if !(*clip_c > 0.0) || clip_c.is_infinite() {
                            return Err(Error::Config(format!(
                                "privacy.clip_c must be positive and finite, got {clip_c}"
                            )));
                        }
                        if !(*delta > 0.0 && *delta < 1.0) {
                            return Err(Error::Config(format!(
                                "privacy.delta must be in (0, 1), got {delta}"
                            )));
                        }
                    }
                    (spec, true, *target_epsilon)
                }
            };

        let schedule = ScheduleSpec {
            steps_m: self.sampler.schedule.steps_m,
            sigma_min: self.sampler.schedule.sigma_min,
            sigma_max: self.sampler.schedule.sigma_max,
            rho: self.sampler.schedule.rho,
        };
        schedule.sigmas()?;
        self.sampler.churn.validate()?;
        if let Some(label) = self.sampler.guidance.label {
            if label >= gmm.num_components() {
                return Err(Error::Config(format!(
                    "guidance label {label} out of range for {} classes",
                    gmm.num_components()
                )));
            }
        }

        let output_dir = {
            let p = PathBuf::from(&run.output_dir);
            if p.is_absolute() {
                p
            } else {
                output_root.join(p)
            }
        };

        Ok(ResolvedExperiment {
            gmm,
            dm,
            net,
            privacy,
            dp_enabled,
            target_epsilon,
            optimizer: AdamSpec {
                lr: self.optimizer.lr,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
            },
            schedule,
            churn: self.sampler.churn,
            guidance: self.sampler.guidance,
            seed: run.seed,
            dataset_size: run.dataset_size,
            noise_multiplicity: run.noise_multiplicity,
            ema_decay: run.ema_decay,
            cond_dropout: run.cond_dropout,
            output_dir,
        })
    }
}

/// A file written by a run, with its content hash for reproducibility checks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestPrivacy {
    pub mode: String,
    /// None when clipping is disabled (non-private runs).
    pub clip_c: Option<f64>,
    pub sigma_dp: f64,
    pub subsample_q: f64,
    pub accounted_steps: usize,
    pub executed_steps: usize,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub best_alpha: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestOutputs {
    pub checkpoint: FileRef,
    pub training_log: FileRef,
    #[serde(default)]
    pub metrics: Vec<FileRef>,
}

/// Written atomically at the end of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub privacy: ManifestPrivacy,
    pub outputs: ManifestOutputs,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        atomic_write(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid manifest: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config(privacy: &str) -> String {
        format!(
            r#"{{
              "data": {{"source": "default9"}},
              "model": {{"config": "edm"}},
              "privacy": {privacy},
              "run": {{
                "seed": 1, "dataset_size": 1000, "expected_batch": 64.0,
                "epochs": 2, "output_dir": "out"
              }}
            }}"#
        )
    }

    #[test]
    fn minimal_config_resolves() {
        let cfg =
            ExperimentConfig::from_json(&minimal_config(r#"{"mode": "non-private"}"#)).unwrap();
        let r = cfg.resolve(Path::new("/tmp/root")).unwrap();
        assert!(!r.dp_enabled);
        assert!(r.privacy.clip_c.is_infinite());
        assert_eq!(r.privacy.sigma_dp, 0.0);
        // q = 64/1000, round(1/q) = 16, epochs 2 -> 32 steps.
        assert_eq!(r.privacy.total_steps, 32);
        assert_eq!(r.net.num_classes, 9);
        assert_eq!(r.output_dir, PathBuf::from("/tmp/root/out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = minimal_config(r#"{"mode": "non-private"}"#)
            .replace("\"seed\": 1,", "\"seed\": 1, \"unknown_knob\": 3,");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn dp_mode_requires_exactly_one_noise_spec() {
        let both = minimal_config(
            r#"{"mode": "dp", "sigma_dp": 2.0, "target_epsilon": 1.0, "delta": 1e-5}"#,
        );
        assert!(ExperimentConfig::from_json(&both)
            .unwrap()
            .resolve(Path::new("."))
            .is_err());
        let neither = minimal_config(r#"{"mode": "dp", "delta": 1e-5}"#);
        assert!(ExperimentConfig::from_json(&neither)
            .unwrap()
            .resolve(Path::new("."))
            .is_err());
        let sigma = minimal_config(r#"{"mode": "dp", "sigma_dp": 2.0, "delta": 1e-5}"#);
        let r = ExperimentConfig::from_json(&sigma)
            .unwrap()
            .resolve(Path::new("."))
            .unwrap();
        assert!(r.dp_enabled);
        assert_eq!(r.privacy.sigma_dp, 2.0);
        assert_eq!(r.privacy.clip_c, 1.0);
        let target = minimal_config(r#"{"mode": "dp", "target_epsilon": 10.0, "delta": 1e-5}"#);
        let r = ExperimentConfig::from_json(&target)
            .unwrap()
            .resolve(Path::new("."))
            .unwrap();
        assert!(r.privacy.sigma_dp.is_nan());
        assert_eq!(r.target_epsilon, Some(10.0));
    }

    #[test]
    fn steps_and_epochs_are_exclusive() {
        let cfg = minimal_config(r#"{"mode": "non-private"}"#)
            .replace("\"epochs\": 2,", "\"epochs\": 2, \"steps\": 10,");
        assert!(ExperimentConfig::from_json(&cfg)
            .unwrap()
            .resolve(Path::new("."))
            .is_err());
    }

    #[test]
    fn custom_data_is_validated() {
        let cfg = minimal_config(r#"{"mode": "non-private"}"#).replace(
            r#"{"source": "default9"}"#,
            r#"{"source": "custom", "means": [[0.0, 0.0]], "component_std": 0.1, "weights": [0.7]}"#,
        );
        assert!(ExperimentConfig::from_json(&cfg)
            .unwrap()
            .resolve(Path::new("."))
            .is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let cfg =
            ExperimentConfig::from_json(&minimal_config(r#"{"mode": "non-private"}"#)).unwrap();
        let manifest = RunManifest {
            tool_version: "0.1.0".into(),
            seed: 1,
            config: cfg,
            privacy: ManifestPrivacy {
                mode: "non-private".into(),
                clip_c: None,
                sigma_dp: 0.0,
                subsample_q: 0.064,
                accounted_steps: 32,
                executed_steps: 32,
                epsilon: None,
                delta: None,
                best_alpha: None,
            },
            outputs: ManifestOutputs {
                checkpoint: FileRef {
                    path: "model.ckpt".into(),
                    sha256: "abc".into(),
                },
                training_log: FileRef {
                    path: "train.csv".into(),
                    sha256: "def".into(),
                },
                metrics: vec![],
            },
        };
        let dir = std::env::temp_dir().join("dpdiff-manifest-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.json");
        manifest.write(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back.privacy.executed_steps, 32);
        assert_eq!(back.outputs.checkpoint.sha256, "abc");
        std::fs::remove_dir_all(&dir).ok();
    }
}
