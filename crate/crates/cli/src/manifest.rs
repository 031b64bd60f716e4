//! Run manifests: the config snapshot, input digests, seed, produced
//! artifacts and timing of every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use msgc_core::{ModelConfig, Result};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub started_at: String,
    pub duration_seconds: f64,
}

pub struct ManifestBuilder {
    command: String,
    arguments: serde_json::Value,
    config: Option<ModelConfig>,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    artifacts: Vec<String>,
    started: Instant,
    started_at: String,
}

impl ManifestBuilder {
    pub fn new(command: &str, arguments: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            arguments,
            config: None,
            seed: None,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            started: Instant::now(),
            started_at: chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        }
    }

    pub fn config(&mut self, config: &ModelConfig) -> &mut Self {
        self.seed = Some(config.seed);
        self.config = Some(config.clone());
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(self)
    }

    pub fn input_opt(&mut self, path: Option<&PathBuf>) -> Result<&mut Self> {
        if let Some(p) = path {
            self.input(p)?;
        }
        Ok(self)
    }

    pub fn artifact(&mut self, path: &Path) -> &mut Self {
        self.artifacts.push(path.display().to_string());
        self
    }

    /// Write `manifest.json` into the output directory.
    pub fn finish(mut self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        self.artifacts.push(path.display().to_string());
        let manifest = RunManifest {
            command: self.command,
            arguments: self.arguments,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            artifacts: self.artifacts,
            started_at: self.started_at,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}
