//! Writes experiment artifacts and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::CliError;
use crate::experiments::{self, Artifacts};
use crate::table::emit_csv;

pub const THREADS_VAR: &str = "MARKOVGEN_THREADS";

#[derive(Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub violated: bool,
    pub summary: Vec<String>,
}

pub fn config_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Thread count from the environment, defaulting to one.
pub fn thread_count() -> Result<usize, CliError> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::config(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Run `kind` and write every artifact under `out_dir`. CSV bytes depend only
/// on the config and seed; the wall-clock timestamp lives in the manifest.
pub fn execute(kind: ExperimentKind, cfg: &ExperimentConfig, config_text: &str, out_dir: &Path) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    let artifacts = pool.install(|| experiments::run(kind, cfg))?;
    write(kind, cfg, config_text, out_dir, artifacts)
}

fn write(kind: ExperimentKind, cfg: &ExperimentConfig, config_text: &str, out_dir: &Path, a: Artifacts) -> Result<RunOutcome, CliError> {
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for (name, t) in &a.tables {
        let f = format!("{name}.csv");
        emit_csv(t, &out_dir.join(&f))?;
        files.push(f);
    }
    for (name, v) in &a.reports {
        let f = format!("{name}.json");
        let mut bytes = serde_json::to_vec_pretty(v)?;
        bytes.push(b'\n');
        fs::write(out_dir.join(&f), bytes)?;
        files.push(f);
    }
    for (name, bytes) in &a.blobs {
        fs::write(out_dir.join(name), bytes)?;
        files.push(name.clone());
    }
    fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    files.push("config.toml".into());
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "kind": kind.name(),
        "seed": cfg.seed,
        "config_sha256": config_digest(config_text),
        "files": files,
        "violated": a.violated,
        "summary": a.summary,
        "created_unix": timestamp,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(out_dir.join("manifest.json"), bytes)?;
    Ok(RunOutcome { out_dir: out_dir.to_owned(), files, violated: a.violated, summary: a.summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_hex() {
        let d = config_digest("seed = 1\n");
        assert_eq!(d.len(), 64);
        assert_eq!(d, config_digest("seed = 1\n"));
        assert_ne!(d, config_digest("seed = 2\n"));
    }

    #[test]
    fn ou_run_writes_manifest_and_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.ou.draws = 500;
        cfg.ou.trajectories = 2;
        let out = execute(ExperimentKind::OuFigures, &cfg, "", dir.path()).unwrap();
        assert!(!out.violated);
        for f in ["trajectories.csv", "histogram.csv", "moments.csv", "manifest.json", "config.toml"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["kind"], "ou-figures");
    }
}
