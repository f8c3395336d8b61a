//! JSON sidecars written next to every produced artifact: what went in
//! (checksums), which settings were used (with all defaults filled in) and
//! the sidecar format version. No timestamps, so reruns are byte-identical.

use std::io::Read;
use std::path::{Path, PathBuf};

use dnilm_core::pipeline::manifest::WindowsEntry;
use dnilm_core::pipeline::{Manifest, SplitMode};
use dnilm_core::Grid;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

pub fn tool_version() -> String {
    format!("dnilm {}", env!("CARGO_PKG_VERSION"))
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    artifact.with_file_name(name)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub path: String,
    pub sha256: String,
}

impl FileChecksum {
    /// `path` is recorded relative to `base` when it lies under it.
    pub fn of(path: &Path, base: &Path) -> Result<Self> {
        let shown = path.strip_prefix(base).unwrap_or(path);
        Ok(FileChecksum {
            path: shown.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub format_version: u32,
    pub tool: String,
    pub inputs: Vec<FileChecksum>,
    pub manifest: Manifest,
    pub output: FileChecksum,
    pub appliances: Vec<String>,
    pub grid: Grid,
    pub rated_capacity: f64,
}

/// Time span `[start, end)` in UTC seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

impl Span {
    pub fn of_grid(g: Grid) -> Self {
        Span {
            start: g.start,
            end: g.start + g.len as f64 * g.period,
        }
    }

    /// Whether a window whose samples run from `first` to `last` inclusive
    /// touches this span.
    pub fn touches(&self, first: f64, last: f64) -> bool {
        first < self.end && last >= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointProvenance {
    pub format_version: u32,
    pub tool: String,
    pub dataset: FileChecksum,
    pub appliances: Vec<String>,
    pub split: SplitMode,
    pub fold: usize,
    pub windows: WindowsEntry,
    pub train_spans: Vec<Span>,
    pub train_windows: usize,
    pub config: serde_json::Value,
    pub checkpoint: FileChecksum,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
