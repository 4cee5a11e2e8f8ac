use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

use mmtl_core::io::atomic_write;

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub bytes: usize,
    pub sha256: String,
}

/// Record of one command invocation: what was run, with which settings, and
/// a digest of every file it wrote.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<Artifact>,
    pub duration_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects written files for the manifest.
#[derive(Debug, Default)]
pub struct Outputs {
    artifacts: Vec<Artifact>,
}

impl Outputs {
    /// Writes `bytes` to `path` atomically and records its digest.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        }
        atomic_write(path, bytes)?;
        self.artifacts.push(Artifact {
            path: path.to_path_buf(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn finish(
        self,
        manifest_path: &Path,
        config: serde_json::Value,
        seeds: Vec<u64>,
        elapsed: Duration,
    ) -> Result<(), CliError> {
        let manifest = RunManifest {
            tool: "mmtl",
            version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().collect(),
            config,
            seeds,
            artifacts: self.artifacts,
            duration_secs: elapsed.as_secs_f64(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(mmtl_core::Error::from)?;
        atomic_write(manifest_path, json.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_inputs() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
