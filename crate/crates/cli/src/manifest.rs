use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// SHA-256 of every output file.
    pub artifact_digests: BTreeMap<String, String>,
    pub duration_secs: f64,
    /// Configuration after applying flags over the file over defaults.
    pub resolved_config: serde_json::Value,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl ManifestBuilder {
    pub fn start(command: &str, config_path: Option<&Path>, seed: Option<u64>) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.into(),
                config_path: config_path.map(Path::to_path_buf),
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                artifact_digests: BTreeMap::new(),
                duration_secs: 0.0,
                resolved_config: serde_json::Value::Null,
            },
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.manifest.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.manifest.outputs.push(path.to_path_buf());
        self
    }

    pub fn config(&mut self, value: impl Serialize) -> Result<&mut Self> {
        self.manifest.resolved_config = serde_json::to_value(value)?;
        Ok(self)
    }

    /// Digests the outputs and writes the manifest to `path`.
    pub fn write(mut self, path: &Path) -> Result<()> {
        for out in &self.manifest.outputs {
            self.manifest
                .artifact_digests
                .insert(out.display().to_string(), file_digest(out)?);
        }
        self.manifest.duration_secs = self.started.elapsed().as_secs_f64();
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
    }
}

/// `<path>.manifest.json`
pub fn beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}
