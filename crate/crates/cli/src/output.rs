//! Atomic file output and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to a temporary file beside `path`, then renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_sha256: String,
    pub config: String,
    pub seed: u64,
    pub reps: Option<u64>,
    pub threads: Option<usize>,
    pub outputs: Vec<OutputEntry>,
    /// Seconds since the Unix epoch; the only time-dependent value written.
    pub created_unix: u64,
}

/// Collects outputs of one command and writes them with a manifest.
pub struct OutputSet {
    dir: PathBuf,
    entries: Vec<OutputEntry>,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.entries.push(OutputEntry {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn finish(
        self,
        command: &str,
        config_path: Option<&Path>,
        config_text: &str,
        seed: u64,
        reps: Option<u64>,
        threads: Option<usize>,
    ) -> Result<PathBuf, CliError> {
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let manifest = Manifest {
            tool: format!("ggsd {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config_sha256: sha256_hex(config_text.as_bytes()),
            config: config_text.to_string(),
            seed,
            reps,
            threads,
            outputs: self.entries,
            created_unix,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = self.dir.join("manifest.json");
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }
}
