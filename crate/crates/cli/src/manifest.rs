//! Per-command provenance record.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use kshot_core::{Config, Error, Result};
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub overrides: Vec<String>,
    pub config: Option<Config>,
    pub seed: Option<u64>,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub out_dir: PathBuf,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, overrides: &[String], config: Option<&Config>, seed: Option<u64>, out_dir: &Path) -> Self {
        Self {
            command: command.to_owned(),
            args: std::env::args().skip(1).collect(),
            overrides: overrides.to_vec(),
            config: config.cloned(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_owned(),
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn write(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::file(&self.out_dir, e))?;
        let path = self.out_dir.join(RUN_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::file(&path, e))
    }

    pub fn finish(mut self, ok: bool) -> Result<()> {
        self.finished_unix = Some(now());
        self.status = if ok { "ok" } else { "failed" }.into();
        self.write()
    }
}
