//! Run manifests: one per command invocation, listing every emitted file
//! with its SHA-256.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// The configuration after defaults and command-line overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outdir: PathBuf,
    pub wall_ms: f64,
    pub artifacts: Vec<Artifact>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Collects artifacts as they are written and emits the manifest last.
pub struct ManifestBuilder {
    command: String,
    config_path: Option<PathBuf>,
    config: serde_json::Value,
    seed: Option<u64>,
    outdir: PathBuf,
    started: Instant,
    artifacts: Vec<String>,
}

impl ManifestBuilder {
    pub fn new(command: &str, config_path: Option<&Path>, config: impl Serialize, seed: Option<u64>, outdir: &Path) -> anyhow::Result<Self> {
        Ok(ManifestBuilder {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config: serde_json::to_value(config)?,
            seed,
            outdir: outdir.to_path_buf(),
            started: Instant::now(),
            artifacts: Vec::new(),
        })
    }

    /// Path for a new artifact under the output directory.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.outdir.join(name)
    }

    /// Hashes the recorded artifacts and writes `manifest.json`.
    pub fn finish(self) -> anyhow::Result<RunManifest> {
        let mut artifacts = Vec::with_capacity(self.artifacts.len());
        for name in &self.artifacts {
            let path = self.outdir.join(name);
            let data = std::fs::read(&path).with_context(|| format!("reading artifact {}", path.display()))?;
            artifacts.push(Artifact {
                path: name.clone(),
                sha256: hex::encode(Sha256::digest(&data)),
                bytes: data.len() as u64,
            });
        }
        let manifest = RunManifest {
            command: self.command,
            config_path: self.config_path,
            config: self.config,
            seed: self.seed,
            tool_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            outdir: self.outdir.clone(),
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
            artifacts,
        };
        let path = self.outdir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_match_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ManifestBuilder::new("test", None, serde_json::json!({"a": 1}), Some(3), dir.path()).unwrap();
        std::fs::write(m.artifact("x.txt"), "abc").unwrap();
        let out = m.finish().unwrap();
        assert_eq!(out.artifacts.len(), 1);
        assert_eq!(
            out.artifacts[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["seed"], 3);
        assert_eq!(v["artifacts"][0]["path"], "x.txt");
    }
}
