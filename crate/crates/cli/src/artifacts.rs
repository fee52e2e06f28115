//! Per-seed artifact directories.
//!
//! ```text
//! <out>/<name>/seed-<s>/checkpoint.bfck
//!                       history.jsonl
//!                       eval.jsonl
//!                       ablation.jsonl, ablation.txt
//!                       stats.jsonl
//!                       manifest.json      size and CRC-32 of every file above
//!                       timestamps.json    wall-clock sidecar, never compared
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use biofuse::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const TIMESTAMPS: &str = "timestamps.json";
pub const CHECKPOINT: &str = "checkpoint.bfck";
pub const HISTORY: &str = "history.jsonl";
pub const EVAL: &str = "eval.jsonl";
pub const ABLATION: &str = "ablation.jsonl";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const STATS: &str = "stats.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub bytes: u64,
    pub crc32: u32,
}

/// Settings that determine the results; output location and thread count do not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    pub data: crate::config::DataConfig,
    pub prep: biofuse::signal::PrepConfig,
    pub split: biofuse::dataset::SplitSpec,
    pub model: biofuse::model::ModelConfig,
    pub files: Vec<FileRecord>,
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Rewrites the manifest from the files currently in `dir`, sorted by name.
pub fn write_manifest(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    for p in paths {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name == MANIFEST || name == TIMESTAMPS {
            continue;
        }
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        files.push(FileRecord {
            name,
            bytes: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
    }
    let m = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        experiment: cfg.name.clone(),
        seed,
        data: cfg.data.clone(),
        prep: cfg.prep.clone(),
        split: cfg.split.clone(),
        model: cfg.model.clone(),
        files,
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
    write_file(&dir.join(MANIFEST), text)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Stamp {
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Wall-clock bracket for a command; written to the sidecar on `finish`.
pub struct Timer {
    command: &'static str,
    started: u128,
}

impl Timer {
    pub fn start(command: &'static str) -> Self {
        Self { command, started: now_ms() }
    }

    pub fn finish(self, dir: &Path) -> Result<()> {
        let path = dir.join(TIMESTAMPS);
        let mut all: BTreeMap<String, Stamp> = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        all.insert(
            self.command.to_string(),
            Stamp {
                started_unix_ms: self.started,
                finished_unix_ms: now_ms(),
            },
        );
        write_file(&path, serde_json::to_string_pretty(&all).expect("timestamps serialize") + "\n")
    }
}

/// `seed-<s>` directories under an experiment directory, sorted by seed.
pub fn seed_dirs(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::config("results", format!("{}: {e}", dir.display())))?;
    let mut out: Vec<(u64, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let seed = name.strip_prefix("seed-")?.parse().ok()?;
            e.path().is_dir().then(|| (seed, e.path()))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Parses JSON-lines records, rejecting unknown schema versions.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, version: u32) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format_err(path, i, e.to_string()))?;
        let got = v.get("schema_version").and_then(|s| s.as_u64());
        if got != Some(version as u64) {
            return Err(format_err(path, i, format!("schema_version {got:?}, expected {version}")));
        }
        out.push(serde_json::from_value(v).map_err(|e| format_err(path, i, e.to_string()))?);
    }
    Ok(out)
}

fn format_err(path: &Path, line: usize, reason: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: line as u64 + 1,
        reason: format!("line {}: {reason}", line + 1),
    }
}
