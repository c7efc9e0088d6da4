//! Run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub version: &'static str,
    /// SHA-256 of the effective configuration serialized as JSON.
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<&'static str, u64>,
    /// SHA-256 of every input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &'static str, config: &impl Serialize) -> CliResult<Self> {
        let config = serde_json::to_value(config).map_err(|e| CliError::Config(e.to_string()))?;
        let bytes = serde_json::to_vec(&config).expect("json values serialize");
        Ok(Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: hex(&Sha256::digest(&bytes)),
            config,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn seed(mut self, name: &'static str, value: u64) -> Self {
        self.seeds.insert(name, value);
        self
    }

    pub fn input(&mut self, role: impl Into<String>, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs
            .insert(role.into(), hex(&Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
