use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
/// Wall-clock data; written next to the outputs but never hashed.
pub const TIMING: &str = "timing.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// sha256 of every output file, keyed by file name.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory of one command. Files are hashed as they are written
/// and the manifest is emitted by `finish`.
pub struct OutputDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl OutputDir {
    pub fn create(dir: PathBuf, command: &str) -> Result<OutputDir> {
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(OutputDir {
            dir,
            manifest: Manifest {
                command: command.to_string(),
                files: BTreeMap::new(),
            },
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.manifest.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut bytes = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut bytes, r)?;
            bytes.push(b'\n');
        }
        self.write(name, &bytes)
    }

    pub fn finish(self, elapsed: std::time::Duration) -> Result<Manifest> {
        let timing = serde_json::json!({ "seconds": elapsed.as_secs_f64() });
        let path = self.dir.join(TIMING);
        std::fs::write(&path, serde_json::to_vec_pretty(&timing)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Re-hashes every file listed in the manifest of `dir`.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let m = read_manifest(dir)?;
    for (name, hash) in &m.files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
        anyhow::ensure!(sha256_hex(&bytes) == *hash, "{} does not match its manifest hash", path.display());
    }
    Ok(m)
}
