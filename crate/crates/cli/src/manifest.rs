//! `run_manifest.json`: what ran, with which resolved settings, on which inputs.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use jetfit::{Error, Result};

pub const FILE_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub threads: usize,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub notes: serde_json::Value,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Hashes every existing file among `paths`.
pub fn hash_inputs(paths: &[PathBuf]) -> Result<Vec<InputHash>> {
    paths
        .iter()
        .filter(|p| p.is_file())
        .map(|p| {
            Ok(InputHash {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let p = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&p, text + "\n").map_err(|e| io(&p, e))?;
        Ok(p)
    }
}
