//! Run manifests: every command writes exactly one `run_manifest.json` into
//! its output directory, capturing the command, the effective config, and
//! the master seed. Re-running from a manifest in deterministic mode
//! reproduces the run's metrics.

use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunMetaError {
    #[error("output directory {0} is not empty (use --force to overwrite)")]
    OutDirNotEmpty(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub effective_config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub out_dir: String,
    pub started_unix_s: u64,
    pub finished_unix_s: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            effective_config: config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            out_dir: out_dir.display().to_string(),
            started_unix_s: now_unix(),
            finished_unix_s: None,
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), RunMetaError> {
        let path = out_dir.join("run_manifest.json");
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<(), RunMetaError> {
        self.finished_unix_s = Some(now_unix());
        self.write(out_dir)
    }

    pub fn load(path: &Path) -> Result<Self, RunMetaError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Create the output directory, refusing to reuse a non-empty one without
/// `force`.
pub fn prepare_out_dir(path: &Path, force: bool) -> Result<(), RunMetaError> {
    if path.exists() {
        let non_empty = std::fs::read_dir(path)?.next().is_some();
        if non_empty && !force {
            return Err(RunMetaError::OutDirNotEmpty(path.display().to_string()));
        }
    }
    std::fs::create_dir_all(path)?;
    Ok(())
}

/// Strip volatile timing fields from a metrics/report JSON value so two
/// deterministic runs compare equal.
pub fn strip_volatile(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("wall_time_s");
            map.remove("started_unix_s");
            map.remove("finished_unix_s");
            for v in map.values_mut() {
                strip_volatile(v);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items.iter_mut() {
                strip_volatile(v);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dir_guard() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        prepare_out_dir(&out, false).unwrap();
        // empty dir is reusable
        prepare_out_dir(&out, false).unwrap();
        std::fs::write(out.join("something.txt"), "x").unwrap();
        assert!(matches!(
            prepare_out_dir(&out, false),
            Err(RunMetaError::OutDirNotEmpty(_))
        ));
        prepare_out_dir(&out, true).unwrap();
    }

    #[test]
    fn manifest_round_trip_and_strip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new(
            "train",
            serde_json::json!({"epochs": 2, "wall_time_s": 1.5}),
            7,
            dir.path(),
        );
        m.write(dir.path()).unwrap();
        let loaded = RunManifest::load(&dir.path().join("run_manifest.json")).unwrap();
        assert_eq!(loaded.command, "train");
        assert_eq!(loaded.seed, 7);
        let mut v = serde_json::to_value(&loaded).unwrap();
        strip_volatile(&mut v);
        assert!(v.get("started_unix_s").is_none());
        assert!(v["effective_config"].get("wall_time_s").is_none());
        assert_eq!(v["effective_config"]["epochs"], 2);
    }
}
