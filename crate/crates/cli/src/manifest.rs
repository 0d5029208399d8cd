use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::util::{write_json, OrInput};

#[derive(Serialize)]
struct Manifest<'a> {
    tool_version: &'static str,
    subcommand: &'a str,
    config: &'a Value,
    /// SHA-256 of the compact config JSON. Keys are sorted, so it is
    /// stable across runs.
    config_digest: String,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a [String],
    wall_clock_s: f64,
}

/// Collects what a run read and wrote, then saves it as `manifest.json`.
pub struct Recorder {
    subcommand: &'static str,
    config: Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    started: Instant,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Recorder {
    pub fn new(subcommand: &'static str, config: &impl Serialize) -> Result<Self> {
        Ok(Recorder {
            subcommand,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)
            .with_context(|| format!("reading {}", path.display()))
            .input()?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn write(self, path: &Path) -> Result<()> {
        let compact = serde_json::to_string(&self.config)?;
        let manifest = Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand,
            config: &self.config,
            config_digest: sha256_hex(compact.as_bytes()),
            inputs: &self.inputs,
            outputs: &self.outputs,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        write_json(path, &manifest)
    }
}
