//! Checkpoint files and model loading.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use teleop_core::control::SbspModel;
use teleop_core::env::Method;
use teleop_core::estimator::EstimatorNet;
use teleop_core::eval::Models;
use teleop_core::nn::Checkpoint;
use teleop_core::sac::SacParams;

pub const ESTIMATOR_FILE: &str = "estimator.ckpt";
pub const SBSP_FILE: &str = "sbsp.ckpt";
pub const POLICY_FILE: &str = "policy.ckpt";

/// Writes through a temporary file so readers never see a partial checkpoint.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> anyhow::Result<()> {
    write_atomic(path, &ck.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Checkpoint::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn training_hint(file: &str) -> &'static str {
    match file {
        POLICY_FILE => "teleop train-policy --out <DIR>",
        _ => "teleop train-estimator --out <DIR>",
    }
}

fn require(dir: &Path, file: &str) -> anyhow::Result<PathBuf> {
    let p = dir.join(file);
    if p.is_file() {
        Ok(p)
    } else {
        Err(anyhow!("missing checkpoint {}; create it with `{}`", p.display(), training_hint(file)))
    }
}

pub fn load_estimator(dir: &Path) -> anyhow::Result<EstimatorNet> {
    Ok(EstimatorNet::from_checkpoint(&load_checkpoint(&require(dir, ESTIMATOR_FILE)?)?)?)
}

pub fn load_sbsp(dir: &Path) -> anyhow::Result<SbspModel> {
    Ok(SbspModel::from_checkpoint(&load_checkpoint(&require(dir, SBSP_FILE)?)?)?)
}

pub fn load_policy(dir: &Path) -> anyhow::Result<SacParams> {
    Ok(SacParams::from_checkpoint(&load_checkpoint(&require(dir, POLICY_FILE)?)?)?)
}

/// Loads exactly what `methods` need; anything missing is a named error.
pub fn load_models(dir: &Path, methods: &[Method]) -> anyhow::Result<Models> {
    let mut m = Models::default();
    if methods.contains(&Method::DrRl) {
        m.estimator = Some(Arc::new(load_estimator(dir)?));
        m.policy = Some(Arc::new(load_policy(dir)?));
    }
    if methods.contains(&Method::Pmdc) {
        m.sbsp = Some(Arc::new(load_sbsp(dir)?));
    }
    Ok(m)
}

/// Loads whatever is present (live sessions switch methods on the fly).
pub fn load_available(dir: &Path) -> anyhow::Result<Models> {
    let mut m = Models::default();
    if dir.join(ESTIMATOR_FILE).is_file() {
        m.estimator = Some(Arc::new(load_estimator(dir)?));
    }
    if dir.join(POLICY_FILE).is_file() {
        m.policy = Some(Arc::new(load_policy(dir)?));
    }
    if dir.join(SBSP_FILE).is_file() {
        m.sbsp = Some(Arc::new(load_sbsp(dir)?));
    }
    Ok(m)
}

/// SHA-256 of each checkpoint file that exists, by file name.
pub fn checkpoint_digests(dir: &Path, methods: &[Method]) -> anyhow::Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    if methods.contains(&Method::DrRl) {
        files.extend([ESTIMATOR_FILE, POLICY_FILE]);
    }
    if methods.contains(&Method::Pmdc) {
        files.push(SBSP_FILE);
    }
    files
        .into_iter()
        .map(|f| {
            let bytes = std::fs::read(dir.join(f)).with_context(|| format!("reading {}", dir.join(f).display()))?;
            Ok((f.to_string(), crate::config::hex_digest(&bytes)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_checkpoint_names_training_command() {
        let dir = tempfile::tempdir().unwrap();
        let e = load_models(dir.path(), &[Method::DrRl]).unwrap_err().to_string();
        assert!(e.contains("estimator.ckpt") && e.contains("teleop train-estimator"), "{e}");
        assert!(load_models(dir.path(), &[Method::Pd]).is_ok());
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new("test");
        ck.push("w", &[2], &[1.5, -2.0]);
        let p = dir.path().join("a/b.ckpt");
        save_checkpoint(&p, &ck).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
        assert!(!p.with_extension("partial").exists());
    }
}
