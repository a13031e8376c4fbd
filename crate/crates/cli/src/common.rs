//! Shared helpers: exit-code mapping, mechanism-argument resolution,
//! denoiser construction and hashing.

use std::path::Path;

use sha2::{Digest, Sha256};

use dp_diffusion::checkpoint::Checkpoint;
use dp_diffusion::dp::steps_for_epochs;
use dp_diffusion::error::Error;
use dp_diffusion::gmm::GmmSpec;
use dp_diffusion::{fmt_f64, Point2, Result};

/// Validation problems exit with 2, runtime failures with 3.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::Domain(_)
        | Error::Config(_)
        | Error::DimensionMismatch { .. }
        | Error::EmptyInput(_) => 2,
        Error::Numerical(_) | Error::Io(_) | Error::CheckpointFormat(_) => 3,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// (q, steps) from the mechanism flags.
pub fn resolve_mechanism(mech: &crate::MechanismArgs) -> Result<(f64, usize)> {
    let q = match (mech.q, mech.batch, mech.n) {
        (Some(q), None, _) => q,
        (None, Some(b), Some(n)) => b / n as f64,
        _ => {
            return Err(Error::InvalidArgument(
                "specify --q, or --batch together with --n".into(),
            ))
        }
    };
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subsampling rate q = {q} not in (0, 1]"
        )));
    }
    let steps = match (mech.steps, mech.epochs) {
        (Some(s), None) => s,
        (None, Some(e)) => steps_for_epochs(e, q),
        (None, None) => return Err(Error::InvalidArgument("specify --steps or --epochs".into())),
        (Some(_), Some(_)) => unreachable!("clap enforces exclusivity"),
    };
    Ok((q, steps))
}

/// Loads a mixture spec from JSON or falls back to the nine-mode default.
pub fn load_gmm(path: Option<&Path>) -> Result<GmmSpec> {
    match path {
        None => Ok(GmmSpec::default_nine()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let spec: GmmSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("invalid mixture spec: {e}")))?;
            GmmSpec::new(spec.means, spec.component_std, spec.weights)
        }
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    Checkpoint::read(path)
}

/// Sample CSV: one `x,y,label` row per point, 17-significant-digit floats,
/// empty label column for unconditional samples.
pub fn samples_csv(points: &[Point2], label: Option<usize>) -> String {
    let mut out = String::from("x,y,label\n");
    let label_str = label.map(|l| l.to_string()).unwrap_or_default();
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_f64(p.x),
            fmt_f64(p.y),
            label_str
        ));
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dp_diffusion::checkpoint::atomic_write(path, contents.as_bytes())
}
