//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest                                   TOML, see `Manifest`
//! <dir>/trials/s<subject>_g<gesture>_r<rep>_<stream>.bin
//! ```
//!
//! Each trial file is `"BGD1"`, `u32` channels, `u32` samples (little endian),
//! followed by `channels · samples` little-endian `f32` values, channel-major.
//! The manifest records the shape and CRC-32 of every file.

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, StreamInfo, Trial};
use crate::error::{Error, Result};
use crate::signal::SignalRecording;

pub const MAGIC: &[u8; 4] = b"BGD1";
pub const MANIFEST_FILE: &str = "manifest";
const FORMAT: &str = "biofuse-dataset";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    classes: usize,
    subjects: Vec<u32>,
    streams: Vec<StreamInfo>,
    trials: Vec<TrialEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrialEntry {
    subject: u32,
    gesture: u32,
    repetition: u32,
    files: Vec<FileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEntry {
    stream: String,
    path: String,
    channels: u32,
    samples: u32,
    crc32: u32,
}

fn format_err(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

fn encode(r: &SignalRecording) -> Result<Vec<u8>> {
    let (c, n) = (r.channels(), r.len());
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * c * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for ch in &r.samples {
        for &v in ch {
            let f = v as f32;
            if f as f64 != v && v.is_finite() {
                return Err(Error::usage(format!(
                    "sample {v} of s{} g{} r{} is not representable as f32",
                    r.subject, r.gesture, r.repetition
                )));
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(buf)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn decode(path: &Path, bytes: &[u8], entry: &FileEntry) -> Result<Vec<Vec<f64>>> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, 0, format!("bad magic {:?}, expected {:?}", &bytes[..4], MAGIC)));
    }
    let (c, n) = (u32_at(bytes, 4), u32_at(bytes, 8));
    if (c, n) != (entry.channels, entry.samples) {
        return Err(format_err(
            path,
            4,
            format!(
                "header declares {c}x{n}, manifest declares {}x{}",
                entry.channels, entry.samples
            ),
        ));
    }
    let expected = HEADER_LEN + 4 * c as usize * n as usize;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let crc = crc32fast::hash(bytes);
    if crc != entry.crc32 {
        return Err(format_err(
            path,
            0,
            format!("checksum mismatch: manifest {:08x}, file {crc:08x}", entry.crc32),
        ));
    }
    let data = &bytes[HEADER_LEN..];
    Ok((0..c as usize)
        .map(|ch| {
            (0..n as usize)
                .map(|t| {
                    let at = 4 * (ch * n as usize + t);
                    f32::from_le_bytes(data[at..at + 4].try_into().expect("4 bytes")) as f64
                })
                .collect()
        })
        .collect())
}

fn trial_file(t: &Trial, stream: &str) -> String {
    format!("trials/s{}_g{}_r{}_{}.bin", t.subject, t.gesture, t.repetition, stream)
}

pub fn write_dataset(d: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    d.validate()?;
    let trials_dir = dir.join("trials");
    fs::create_dir_all(&trials_dir).map_err(|e| Error::io(&trials_dir, e))?;
    let mut entries = Vec::with_capacity(d.trials.len());
    for t in &d.trials {
        let mut files = Vec::with_capacity(d.streams.len());
        for (s, r) in d.streams.iter().zip(&t.recordings) {
            let rel = trial_file(t, &s.name);
            let bytes = encode(r)?;
            let path = dir.join(&rel);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            files.push(FileEntry {
                stream: s.name.clone(),
                path: rel,
                channels: r.channels() as u32,
                samples: r.len() as u32,
                crc32: crc32fast::hash(&bytes),
            });
        }
        entries.push(TrialEntry {
            subject: t.subject,
            gesture: t.gesture,
            repetition: t.repetition,
            files,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        classes: d.classes,
        subjects: d.subjects(),
        streams: d.streams.clone(),
        trials: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::usage(format!("manifest serialization: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn safe_join(dir: &Path, rel: &str, manifest: &Path) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(format_err(manifest, 0, format!("trial path `{rel}` must be relative and inside the dataset")));
    }
    Ok(dir.join(p))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| {
        let offset = e.span().map_or(0, |s| s.start as u64);
        format_err(&mpath, offset, format!("malformed manifest: {}", e.message()))
    })?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(format_err(
            &mpath,
            0,
            format!("unsupported format `{}` version {}", m.format, m.version),
        ));
    }
    let mut trials = Vec::with_capacity(m.trials.len());
    for t in &m.trials {
        if t.files.len() != m.streams.len() {
            return Err(format_err(
                &mpath,
                0,
                format!(
                    "trial s{} g{} r{} lists {} files for {} streams",
                    t.subject,
                    t.gesture,
                    t.repetition,
                    t.files.len(),
                    m.streams.len()
                ),
            ));
        }
        let mut recordings = Vec::with_capacity(m.streams.len());
        for (s, f) in m.streams.iter().zip(&t.files) {
            if f.stream != s.name {
                return Err(format_err(
                    &mpath,
                    0,
                    format!("file for stream `{}` listed where `{}` was expected", f.stream, s.name),
                ));
            }
            let path = safe_join(dir, &f.path, &mpath)?;
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let samples = decode(&path, &bytes, f)?;
            let rec = SignalRecording::new(s.modality, s.fs, samples, t.subject, t.gesture, t.repetition)
                .map_err(|e| e.context(path.display().to_string()))?;
            recordings.push(rec);
        }
        trials.push(Trial {
            subject: t.subject,
            gesture: t.gesture,
            repetition: t.repetition,
            recordings,
        });
    }
    let d = Dataset {
        streams: m.streams,
        classes: m.classes,
        trials,
    };
    d.validate().map_err(|e| e.context(mpath.display().to_string()))?;
    Ok(d)
}
