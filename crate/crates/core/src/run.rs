//! Run manifests: what a command was asked to do and what it produced.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::io::write_atomic;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub code_version: String,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: Option<f64>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: Value,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, config: Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            code_version: CODE_VERSION.to_string(),
            started_at: now(),
            finished_at: None,
            outputs: BTreeMap::new(),
            metrics: Value::Null,
        }
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.display().to_string());
    }

    /// Stamps the end time and writes the manifest atomically.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_at = Some(now());
        let json = serde_json::to_string_pretty(&self)?;
        write_atomic(path, json.as_bytes())
    }
}
