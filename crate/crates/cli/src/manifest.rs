use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub wall_clock_s: f64,
    /// SHA-256 of every input and output file.
    pub checksums: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn files_under(path: &Path) -> Vec<PathBuf> {
    if path.is_file() {
        return vec![path.to_path_buf()];
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map(|rd| {
            rd.filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect()
        })
        .unwrap_or_default();
    out.sort();
    out
}

pub struct ManifestBuilder {
    command: String,
    started: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: Instant::now(),
        }
    }

    /// Hashes the files (or the files directly inside directories) and writes `path`.
    pub fn finish(
        self,
        path: &Path,
        config: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        seed: Option<u64>,
    ) -> Result<()> {
        let mut checksums = BTreeMap::new();
        for p in inputs.iter().chain(outputs) {
            for f in files_under(p) {
                checksums.insert(f.display().to_string(), sha256_file(&f)?);
            }
        }
        let m = RunManifest {
            command: self.command,
            config,
            inputs: inputs.to_vec(),
            outputs: outputs.to_vec(),
            seed,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            checksums,
        };
        std::fs::write(path, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// `report.json` → `report.json.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
