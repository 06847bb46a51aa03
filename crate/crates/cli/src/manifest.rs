use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    fn of(path: &Path) -> Result<Self> {
        let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&data)),
            bytes: data.len() as u64,
        })
    }
}

/// Record of one command invocation, written as `manifest.json` in the
/// output directory when the command finishes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<String>,
    /// Fully resolved configuration values.
    pub resolved: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub duration_secs: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_path: None,
            resolved: BTreeMap::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn config(&mut self, path: Option<&Path>, pairs: &[(&str, String)]) {
        self.config_path = path.map(|p| p.display().to_string());
        self.resolved
            .extend(pairs.iter().map(|(k, v)| (k.to_string(), v.clone())));
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<PathBuf> {
        self.duration_secs = self.started.map_or(0.0, |t| t.elapsed().as_secs_f64());
        let path = out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self)?;
        modvlad::write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }
}
