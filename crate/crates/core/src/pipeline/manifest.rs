use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub name: &'static str,
    pub key: String,
    pub seconds: f64,
    /// Loaded from a previous run instead of recomputed.
    pub reused: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: &'static str,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    /// Hash over artifact names and checksums.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.artifacts {
            h.update(a.name.as_bytes());
            h.update(b"\0");
            h.update(a.sha256.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# asrep run manifest");
        let _ = writeln!(s, "content_hash = {}", self.content_hash());
        let _ = writeln!(s, "\n[config]");
        s.push_str(&self.config.to_toml());
        let _ = writeln!(s, "\n[stages]");
        for st in &self.stages {
            let _ = writeln!(s, "{} {} {:.3}s{}", st.name, st.key, st.seconds, if st.reused { " (reused)" } else { "" });
        }
        let _ = writeln!(s, "\n[artifacts]");
        for a in &self.artifacts {
            let _ = writeln!(s, "{} {} {}", a.name, a.sha256, a.path.display());
        }
        s
    }

    /// Re-hashes every artifact and compares with the recorded checksum.
    pub fn verify(&self) -> Result<()> {
        for a in &self.artifacts {
            let actual = file_sha256(&a.path)?;
            if actual != a.sha256 {
                return Err(Error::Checkpoint(format!("{} changed on disk: {}", a.name, a.path.display())));
            }
        }
        Ok(())
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
