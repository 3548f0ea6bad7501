//! Run manifests: resolved configuration, timings and an output inventory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use cellsearch::metrics::write_atomic;
use cellsearch::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub software: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub operator_mask: Vec<String>,
    pub config: RunConfig,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub stages: Vec<Stage>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir)? {
        entries.push(entry?.path());
    }
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Every file under `root` except the manifest itself, sorted by path.
pub fn inventory(root: &Path) -> Result<Vec<FileEntry>> {
    let mut paths = Vec::new();
    collect(root, &mut paths)?;
    let mut files = Vec::new();
    for path in paths {
        let rel = path.strip_prefix(root).expect("under root");
        if rel == Path::new(MANIFEST_FILE) {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| Error::File {
            path: path.clone(),
            message: e.to_string(),
        })?;
        files.push(FileEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(files)
}

/// Collects stage timings while a command runs.
pub struct Recorder {
    command: String,
    args: Vec<String>,
    started: Instant,
    started_unix: u64,
    stage_start: Instant,
    stages: Vec<Stage>,
}

impl Recorder {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        let now = Instant::now();
        Recorder {
            command: command.to_string(),
            args,
            started: now,
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            stage_start: now,
            stages: Vec::new(),
        }
    }

    /// Closes the current stage under `name`.
    pub fn stage(&mut self, name: &str) {
        let now = Instant::now();
        self.stages.push(Stage {
            name: name.to_string(),
            seconds: (now - self.stage_start).as_secs_f64(),
        });
        self.stage_start = now;
    }

    pub fn finish(self, config: &RunConfig, out_dir: &Path) -> Result<Manifest> {
        let manifest = Manifest {
            software: format!("cellsearch {}", env!("CARGO_PKG_VERSION")),
            command: self.command,
            args: self.args,
            seed: config.seed,
            operator_mask: config
                .network
                .operator_mask
                .names()
                .iter()
                .map(|s| s.to_string())
                .collect(),
            config: config.clone(),
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            stages: self.stages,
            files: inventory(out_dir)?,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(manifest)
    }
}
