//! Binary checkpoint format: architecture descriptor, DM config tag, flat
//! parameter vector and the EMA shadow, behind a magic/version header.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DPDFCKPT"
//! 8       4     format version (u32, currently 1)
//! 12      4     hidden_width (u32)
//! 16      4     depth (u32)
//! 20      4     fourier_features (u32)
//! 24      4     class_embed_dim (u32)
//! 28      4     num_classes (u32)
//! 32      4     dm config tag (u32: 0 = vp, 1 = ve, 2 = vpred, 3 = edm)
//! 36      8     param_count (u64)
//! 44      8     ema_decay (f64)
//! 52      8*P   theta (f64 x param_count)
//! 52+8P   8*P   theta_ema (f64 x param_count)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dm::DmKind;
use crate::error::{Error, Result};
use crate::net::{DenoiserParams, EmaParams, NetSpec};

pub const MAGIC: &[u8; 8] = b"DPDFCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 52;

fn dm_kind_tag(kind: DmKind) -> u32 {
    match kind {
        DmKind::Vp => 0,
        DmKind::Ve => 1,
        DmKind::VPred => 2,
        DmKind::Edm => 3,
    }
}

fn dm_kind_from_tag(tag: u32) -> Result<DmKind> {
    Ok(match tag {
        0 => DmKind::Vp,
        1 => DmKind::Ve,
        2 => DmKind::VPred,
        3 => DmKind::Edm,
        other => {
            return Err(Error::CheckpointFormat(format!(
                "unknown DM config tag {other}"
            )))
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetSpec,
    pub dm_kind: DmKind,
    pub theta: Vec<f64>,
    pub ema_theta: Vec<f64>,
    pub ema_decay: f64,
}

impl Checkpoint {
    pub fn from_training(params: &DenoiserParams, ema: &EmaParams, dm_kind: DmKind) -> Self {
        Checkpoint {
            spec: params.spec,
            dm_kind,
            theta: params.theta.clone(),
            ema_theta: ema.theta.clone(),
            ema_decay: ema.decay,
        }
    }

    pub fn params(&self) -> Result<DenoiserParams> {
        DenoiserParams::new(self.spec, self.theta.clone())
    }

    /// The EMA shadow as usable parameters; the default weights for sampling.
    pub fn ema_params(&self) -> Result<DenoiserParams> {
        DenoiserParams::new(self.spec, self.ema_theta.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.theta.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 16 * p);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            self.spec.hidden_width,
            self.spec.depth,
            self.spec.fourier_features,
            self.spec.class_embed_dim,
            self.spec.num_classes,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&dm_kind_tag(self.dm_kind).to_le_bytes());
        out.extend_from_slice(&(p as u64).to_le_bytes());
        out.extend_from_slice(&self.ema_decay.to_le_bytes());
        for v in self.theta.iter().chain(&self.ema_theta) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::CheckpointFormat(msg.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(fail("truncated header"));
        }
        if &bytes[0..8] != MAGIC {
            return Err(fail("bad magic"));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::CheckpointFormat(format!(
                "unsupported version {version}"
            )));
        }
        let spec = NetSpec {
            hidden_width: u32_at(12) as usize,
            depth: u32_at(16) as usize,
            fourier_features: u32_at(20) as usize,
            class_embed_dim: u32_at(24) as usize,
            num_classes: u32_at(28) as usize,
        };
        let dm_kind = dm_kind_from_tag(u32_at(32))?;
        let param_count = u64::from_le_bytes(bytes[36..44].try_into().unwrap()) as usize;
        if param_count != spec.param_count() {
            return Err(Error::CheckpointFormat(format!(
                "param count {param_count} does not match descriptor ({})",
                spec.param_count()
            )));
        }
        let ema_decay = f64::from_le_bytes(bytes[44..52].try_into().unwrap());
        let need = HEADER_LEN + 16 * param_count;
        if bytes.len() != need {
            return Err(Error::CheckpointFormat(format!(
                "expected {need} bytes, got {}",
                bytes.len()
            )));
        }
        let read_vec = |off: usize| -> Vec<f64> {
            bytes[off..off + 8 * param_count]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Ok(Checkpoint {
            spec,
            dm_kind,
            theta: read_vec(HEADER_LEN),
            ema_theta: read_vec(HEADER_LEN + 8 * param_count),
            ema_decay,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes via a temporary sibling file and rename, so readers never observe
/// a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
