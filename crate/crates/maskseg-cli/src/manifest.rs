//! Per-command run manifests: enough provenance to re-run any command.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use maskseg::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub struct RunTracker {
    manifest: RunManifest,
}

impl RunTracker {
    pub fn start(command: &str) -> Self {
        RunTracker {
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                config_path: None,
                seed: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                started_unix: now_unix(),
                finished_unix: 0,
            },
        }
    }

    pub fn config_path(&mut self, path: Option<&Path>) -> &mut Self {
        self.manifest.config_path = path.map(|p| p.display().to_string());
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: impl AsRef<Path>) -> &mut Self {
        self.manifest.inputs.push(path.as_ref().display().to_string());
        self
    }

    pub fn output(&mut self, path: impl AsRef<Path>) -> &mut Self {
        self.manifest
            .outputs
            .push(path.as_ref().display().to_string());
        self
    }

    /// Atomic write (temp file + rename) of `run_manifest.json` in `dir`.
    pub fn finish(mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.manifest.finished_unix = now_unix();
        let tmp = dir.join("run_manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)?)?;
        std::fs::rename(&tmp, dir.join("run_manifest.json"))?;
        Ok(())
    }
}
