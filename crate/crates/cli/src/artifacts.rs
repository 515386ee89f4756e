use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use dprobe_core::fsutil::atomic_write;

use crate::config::sha256_file;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// `manifests/<command>.json`: what a command wrote, under which config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub artifacts: Vec<ArtifactEntry>,
}

pub struct Artifacts {
    root: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl Artifacts {
    pub fn new(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Artifacts { root: root.to_path_buf(), entries: Vec::new() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Writes `rel` atomically and records it.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        atomic_write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(&path)?;
        Ok(path)
    }

    /// Records a file something else wrote under the output directory.
    pub fn record(&mut self, path: &Path) -> anyhow::Result<()> {
        let rel = path
            .strip_prefix(&self.root)
            .with_context(|| format!("{} is outside the output directory", path.display()))?;
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        let bytes = fs::metadata(path)?.len();
        self.entries.retain(|e| e.path != rel);
        self.entries.push(ArtifactEntry { path: rel, sha256: sha256_file(path)?, bytes });
        Ok(())
    }

    pub fn finish(mut self, command: &str, config_hash: &str) -> anyhow::Result<PathBuf> {
        self.entries.sort();
        let manifest = RunManifest {
            command: command.into(),
            config_hash: config_hash.into(),
            code_version: CODE_VERSION.into(),
            artifacts: self.entries,
        };
        let path = self.root.join("manifests").join(format!("{command}.json"));
        fs::create_dir_all(path.parent().unwrap())?;
        let mut body = serde_json::to_vec_pretty(&manifest)?;
        body.push(b'\n');
        atomic_write(&path, &body).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn json_bytes<T: Serialize>(v: &T) -> anyhow::Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}
