//! Output files, each stamped with the config hash, seed and build.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::CliError;

pub const GIT_DESCRIBE: &str = env!("DEGNSE_GIT_DESCRIBE");

#[derive(Debug, Clone, Serialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub subcommand: String,
}

pub struct ArtifactWriter {
    dir: PathBuf,
    stamp: Stamp,
    written: Vec<PathBuf>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path, stamp: Stamp) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(ArtifactWriter { dir: dir.to_path_buf(), stamp, written: Vec::new() })
    }

    /// One `key=value` line, used as the CSV comment header and binary preamble.
    pub fn header_line(&self) -> String {
        format!(
            "degnse config_hash={} seed={} git={} subcommand={}",
            self.stamp.config_hash, self.stamp.seed, self.stamp.git_describe, self.stamp.subcommand
        )
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.written.push(path);
        Ok(())
    }

    /// `body` is wrapped as `{"provenance": …, "report": body}`.
    pub fn json_value(&mut self, name: &str, body: Value) -> Result<(), CliError> {
        let doc = json!({ "provenance": self.stamp, "report": body });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
        self.put(name, text.as_bytes())
    }

    /// `csv` must already carry the header as `#` comment lines.
    pub fn csv(&mut self, name: &str, csv: &str) -> Result<(), CliError> {
        self.put(name, csv.as_bytes())
    }

    /// Header line, then `rows` and `cols` as little-endian u64, then the values as f64.
    pub fn binary(&mut self, name: &str, rows: usize, cols: usize, values: &[f64]) -> Result<(), CliError> {
        let mut out = format!("{}\n", self.header_line()).into_bytes();
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(cols as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        self.put(name, &out)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}
