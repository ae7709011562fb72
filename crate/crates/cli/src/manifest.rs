use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one subcommand run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

/// Collects inputs and outputs while a subcommand runs.
pub struct Run {
    command: String,
    out_dir: PathBuf,
    seed: Option<u64>,
    config: BTreeMap<String, String>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    started: Instant,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl Run {
    pub fn start(command: &str, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(clar::ClarError::Io).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Run {
            command: command.to_string(),
            out_dir: out_dir.to_path_buf(),
            seed: None,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn config(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    /// Records every `key = value` line of a config snapshot.
    pub fn config_text(&mut self, text: &str) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.config(k.trim(), v.trim());
            }
        }
    }

    /// Reads an input file as UTF-8, recording its digest.
    pub fn read(&mut self, path: &Path) -> Result<String> {
        let bytes = fs::read(path).map_err(clar::ClarError::Io).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        String::from_utf8(bytes).map_err(|e| {
            anyhow::Error::new(clar::ClarError::Format { line: 0, msg: format!("not UTF-8: {e}") })
                .context(format!("reading {}", path.display()))
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents).map_err(clar::ClarError::Io).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out_dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json + "\n").map_err(clar::ClarError::Io).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
