//! Deterministic output emission: CSV for series/curves, JSON for structured
//! reports, plus the run manifest. All floating-point values are printed with
//! 17 significant digits so parsing them back is exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// 17-significant-digit formatting (round-trip exact for f64).
pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

pub struct CsvWriter {
    path: PathBuf,
    buf: String,
}

impl CsvWriter {
    pub fn new(path: PathBuf, header: &str) -> Self {
        let mut buf = String::new();
        buf.push_str(header);
        buf.push('\n');
        Self { path, buf }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.buf.push_str(&cells.join(","));
        self.buf.push('\n');
    }

    pub fn row_f64(&mut self, vals: &[f64]) {
        let cells: Vec<String> = vals.iter().map(|v| fmt(*v)).collect();
        self.row(&cells);
    }

    /// Write atomically (temp file + rename).
    pub fn finish(self) -> std::io::Result<PathBuf> {
        write_atomic(&self.path, self.buf.as_bytes())?;
        Ok(self.path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_atomic(path, text.as_bytes())
}

/// Run metadata written at the end of every command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub stats: serde_json::Map<String, serde_json::Value>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash,
            started_unix: now_unix(),
            finished_unix: 0.0,
            stats: serde_json::Map::new(),
            warnings: Vec::new(),
        }
    }

    pub fn stat(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.stats.insert(key.to_string(), value.into());
    }

    pub fn warn(&mut self, text: impl Into<String>) {
        self.warnings.push(text.into());
    }

    /// Finalize and write atomically to `<dir>/manifest.json`.
    pub fn finish(mut self, dir: &Path) -> std::io::Result<()> {
        self.finished_unix = now_unix();
        write_json(&dir.join("manifest.json"), &self)
    }
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}
