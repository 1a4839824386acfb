use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const FILE: &str = "run_manifest.json";

pub fn version() -> String {
    option_env!("OWSOL_BUILD_VERSION")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Written once per output directory, after the command's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Effective `key = value` configuration.
    pub config: String,
    /// Input directories the run read from.
    pub inputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Relative to the output directory, sorted.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, config: String, inputs: Vec<PathBuf>) -> Self {
        Self {
            command: command.into(),
            version: version(),
            seed,
            config,
            inputs,
            started_unix: now(),
            finished_unix: 0,
            artifacts: Vec::new(),
        }
    }

    pub fn finish(mut self, out: &Path) -> owsol::Result<()> {
        self.finished_unix = now();
        self.artifacts = list_files(out, out).map_err(|e| io(out, e))?;
        self.artifacts.retain(|a| a != FILE);
        self.artifacts.sort();
        let bytes = serde_json::to_vec_pretty(&self)?;
        std::fs::write(out.join(FILE), bytes).map_err(|e| io(&out.join(FILE), e))
    }

    pub fn read(dir: &Path) -> owsol::Result<Self> {
        let path = dir.join(FILE);
        let bytes = std::fs::read(&path).map_err(|e| io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn io(path: &Path, source: std::io::Error) -> owsol::Error {
    owsol::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Files below `dir`, excluding nested run directories that carry their own
/// manifest.
fn list_files(root: &Path, dir: &Path) -> std::io::Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            if path != root && path.join(FILE).exists() {
                continue;
            }
            out.extend(list_files(root, &path)?);
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(out)
}
