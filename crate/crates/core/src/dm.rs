//! The four diffusion-model configurations (VP, VE, v-prediction, EDM):
//! denoiser preconditioning, training noise distributions, loss weightings
//! and the sigma(t) schedules with their closed-form inverses.
//!
//! The denoiser wrapper follows the EDM parameterization
//! `D(x; sigma) = c_skip(sigma) x + c_out(sigma) F(c_in(sigma) x; c_noise(sigma))`
//! where F is the raw neural network.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::Point2;

/// Which of the four configurations is in use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DmKind {
    Vp,
    Ve,
    VPred,
    Edm,
}

/// A configuration with its per-kind constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DmConfig {
    Vp {
        beta_d: f64,
        beta_min: f64,
        eps_t: f64,
        m_disc: u32,
    },
    Ve {
        sigma_min: f64,
        sigma_max: f64,
    },
    VPred {
        eps_min: f64,
        eps_max: f64,
    },
    Edm {
        p_mean: f64,
        p_std: f64,
        sigma_data: f64,
    },
}

/// The preconditioning scalars evaluated at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

/// sigma(t) for the VP schedule: sqrt(exp(beta_d t^2 / 2 + beta_min t) - 1).
pub fn vp_sigma_from_t(beta_d: f64, beta_min: f64, t: f64) -> f64 {
    ((0.5 * beta_d * t * t + beta_min * t).exp() - 1.0).sqrt()
}

/// Closed-form inverse of the VP schedule, solving the quadratic
/// beta_d t^2 / 2 + beta_min t = ln(1 + sigma^2).
pub fn vp_t_from_sigma(beta_d: f64, beta_min: f64, sigma: f64) -> f64 {
    let l = sigma.mul_add(sigma, 1.0).ln();
    ((beta_min * beta_min + 2.0 * beta_d * l).sqrt() - beta_min) / beta_d
}

/// sigma(t) for the v-prediction cosine schedule: sqrt(cos^-2(pi t / 2) - 1),
/// i.e. tan(pi t / 2).
pub fn vpred_sigma_from_t(t: f64) -> f64 {
    (PI * t / 2.0).tan()
}

/// Closed-form inverse of the cosine schedule: (2/pi) arccos(1/sqrt(1+sigma^2)).
pub fn vpred_t_from_sigma(sigma: f64) -> f64 {
    (2.0 / PI) * (1.0 / sigma.mul_add(sigma, 1.0).sqrt()).acos()
}

impl DmConfig {
    pub fn vp() -> Self {
        DmConfig::Vp {
            beta_d: 19.9,
            beta_min: 0.1,
            eps_t: 1e-5,
            m_disc: 1000,
        }
    }

    pub fn ve() -> Self {
        DmConfig::Ve {
            sigma_min: 0.002,
            sigma_max: 80.0,
        }
    }

    /// The v-prediction constants adjusted so that training sigmas cover the
    /// sampler range [0.002, 80].
    pub fn vpred() -> Self {
        let eps_min = (2.0 / PI) * (1.0 / (1.0 + (-13.0f64).exp()).sqrt()).acos();
        let eps_max = (2.0 / PI) * (1.0 / (1.0 + (9.0f64).exp()).sqrt()).acos();
        DmConfig::VPred { eps_min, eps_max }
    }

    /// EDM with sigma_data fixed at sqrt(1/3), the standard deviation of a
    /// uniform distribution on [-1, 1]. Estimating sigma_data from the data
    /// would itself carry a privacy cost.
    pub fn edm() -> Self {
        DmConfig::Edm {
            p_mean: -1.2,
            p_std: 1.2,
            sigma_data: (1.0f64 / 3.0).sqrt(),
        }
    }

    pub fn from_kind(kind: DmKind) -> Self {
        match kind {
            DmKind::Vp => Self::vp(),
            DmKind::Ve => Self::ve(),
            DmKind::VPred => Self::vpred(),
            DmKind::Edm => Self::edm(),
        }
    }

    pub fn kind(&self) -> DmKind {
        match self {
            DmConfig::Vp { .. } => DmKind::Vp,
            DmConfig::Ve { .. } => DmKind::Ve,
            DmConfig::VPred { .. } => DmKind::VPred,
            DmConfig::Edm { .. } => DmKind::Edm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DmConfig::Vp {
                beta_d,
                beta_min,
                eps_t,
                m_disc,
            } => beta_d > 0.0 && beta_min > 0.0 && eps_t > 0.0 && eps_t < 1.0 && m_disc >= 2,
            DmConfig::Ve {
                sigma_min,
                sigma_max,
            } => sigma_min > 0.0 && sigma_min < sigma_max,
            DmConfig::VPred { eps_min, eps_max } => {
                eps_min > 0.0 && eps_min < eps_max && eps_max < 1.0
            }
            DmConfig::Edm {
                p_std, sigma_data, ..
            } => p_std > 0.0 && sigma_data > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid DM config constants: {self:?}"
            )))
        }
    }

    /// The four preconditioning scalars at noise level sigma.
    pub fn precondition(&self, sigma: f64) -> Result<Preconditioning> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!(
                "preconditioning requires sigma > 0, got {sigma}"
            )));
        }
        Ok(match *self {
            DmConfig::Vp {
                beta_d,
                beta_min,
                m_disc,
                ..
            } => Preconditioning {
                c_skip: 1.0,
                c_out: -sigma,
                c_in: 1.0 / sigma.mul_add(sigma, 1.0).sqrt(),
                c_noise: (m_disc as f64 - 1.0) * vp_t_from_sigma(beta_d, beta_min, sigma),
            },
            DmConfig::Ve { .. } => Preconditioning {
                c_skip: 1.0,
                c_out: sigma,
                c_in: 1.0,
                c_noise: (0.5 * sigma).ln(),
            },
            DmConfig::VPred { .. } => {
                let s2p1 = sigma.mul_add(sigma, 1.0);
                Preconditioning {
                    c_skip: 1.0 / s2p1,
                    c_out: sigma / s2p1.sqrt(),
                    c_in: 1.0 / s2p1.sqrt(),
                    c_noise: vpred_t_from_sigma(sigma),
                }
            }
            DmConfig::Edm { sigma_data, .. } => {
                let denom = sigma.mul_add(sigma, sigma_data * sigma_data);
                Preconditioning {
                    c_skip: sigma_data * sigma_data / denom,
                    c_out: sigma * sigma_data / denom.sqrt(),
                    c_in: 1.0 / denom.sqrt(),
                    c_noise: 0.25 * sigma.ln(),
                }
            }
        })
    }

    /// Draws one training noise level from this config's p(sigma).
    pub fn sample_training_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DmConfig::Vp {
                beta_d,
                beta_min,
                eps_t,
                ..
            } => {
                let t = rng.gen_range(eps_t..1.0);
                vp_sigma_from_t(beta_d, beta_min, t)
            }
            DmConfig::Ve {
                sigma_min,
                sigma_max,
            } => {
                let l = rng.gen_range(sigma_min.ln()..sigma_max.ln());
                l.exp()
            }
            DmConfig::VPred { eps_min, eps_max } => {
                let t = rng.gen_range(eps_min..eps_max);
                vpred_sigma_from_t(t)
            }
            DmConfig::Edm { p_mean, p_std, .. } => {
                let z: f64 = rng.sample(StandardNormal);
                (p_mean + p_std * z).exp()
            }
        }
    }

    /// The loss weighting lambda(sigma).
    pub fn loss_weight(&self, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!(
                "loss weight requires sigma > 0, got {sigma}"
            )));
        }
        Ok(match *self {
            DmConfig::Vp { .. } | DmConfig::Ve { .. } => 1.0 / (sigma * sigma),
            DmConfig::VPred { .. } => sigma.mul_add(sigma, 1.0) / (sigma * sigma),
            DmConfig::Edm { sigma_data, .. } => {
                sigma.mul_add(sigma, sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
            }
        })
    }
}

/// A raw network F(x_in; c_noise, label); the trainable part of a denoiser.
pub trait RawNet {
    fn eval(&self, x_in: Point2, c_noise: f64, label: Option<usize>) -> Point2;
}

/// Zero network, useful as a stub: the denoiser collapses to c_skip * x.
pub struct ZeroNet;

impl RawNet for ZeroNet {
    fn eval(&self, _x_in: Point2, _c_noise: f64, _label: Option<usize>) -> Point2 {
        Point2::ZERO
    }
}

/// The preconditioned denoiser
/// `D(x; sigma) = c_skip x + c_out F(c_in x; c_noise)`, with the label
/// forwarded to the network's class embedding (None selects the null token).
pub fn denoise(
    cfg: &DmConfig,
    net: &impl RawNet,
    x: Point2,
    sigma: f64,
    label: Option<usize>,
) -> Result<Point2> {
    let p = cfg.precondition(sigma)?;
    let f = net.eval(x.scale(p.c_in), p.c_noise, label);
    Ok(x.scale(p.c_skip).add(f.scale(p.c_out)))
}
