use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

const SCHEMA_VERSION: u32 = 1;

/// Timing and provenance record; written once, success or failure.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_time_seconds: f64,
    pub peak_memory_bytes: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub code_version: &'static str,
}

pub struct RunRecorder {
    command: String,
    started: Instant,
    out_dir: PathBuf,
    pub config: Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
}

impl RunRecorder {
    pub fn new(command: &str, out_dir: &Path) -> Self {
        RunRecorder {
            command: command.to_string(),
            started: Instant::now(),
            out_dir: out_dir.to_path_buf(),
            config: Value::Null,
            seed: None,
            artifacts: Vec::new(),
        }
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    /// Writes the manifest for `outcome` and passes the outcome through.
    pub fn finish<T>(self, outcome: Result<T>) -> Result<T> {
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            command: self.command,
            config: self.config,
            seed: self.seed,
            status: if outcome.is_ok() { "ok" } else { "failed" },
            error: outcome.as_ref().err().map(|e| format!("{e:#}")),
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
            peak_memory_bytes: peak_rss_bytes(),
            artifacts: self.artifacts,
            code_version: env!("CARGO_PKG_VERSION"),
        };
        let path = self.out_dir.join(manifest_name(&manifest.command));
        let written = std::fs::create_dir_all(&self.out_dir)
            .map_err(anyhow::Error::from)
            .and_then(|_| Ok(std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?))
            .with_context(|| format!("writing {}", path.display()));
        match (outcome, written) {
            (Ok(v), Ok(())) => Ok(v),
            (Err(e), _) => Err(e),
            (Ok(_), Err(e)) => Err(e),
        }
    }
}

/// One manifest per command, so `train` and `eval` can share a directory.
pub fn manifest_name(command: &str) -> String {
    format!("run_{command}.json")
}

/// Peak resident set size from `/proc/self/status`; `None` off Linux.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
