//! Run manifests: one JSON record per command invocation, enough to replay
//! the run and reproduce its outputs bit for bit on the same platform.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use patchcast::data_io::file_digest;
use patchcast::error::{Error, Result};
use serde::Serialize;

/// Record of one CLI run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Raw argument vector.
    pub argv: Vec<String>,
    /// Crate version that produced the run.
    pub tool_version: String,
    /// Random generator family used throughout.
    pub rng: &'static str,
    /// Every configuration value after defaults and overrides.
    pub resolved_config: serde_json::Value,
    /// Seeds in play, by role.
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every dataset file read or written.
    pub dataset_digests: BTreeMap<String, String>,
    /// Files the command produced.
    pub output_paths: Vec<String>,
    /// RFC 3339 start timestamp.
    pub started: String,
    /// RFC 3339 end timestamp.
    pub finished: String,
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                rng: "chacha8",
                resolved_config: serde_json::Value::Null,
                seeds: BTreeMap::new(),
                dataset_digests: BTreeMap::new(),
                output_paths: Vec::new(),
                started: now(),
                finished: String::new(),
            },
        }
    }

    pub fn config(&mut self, value: serde_json::Value) -> &mut Self {
        self.manifest.resolved_config = value;
        self
    }

    pub fn seed(&mut self, role: &str, seed: u64) -> &mut Self {
        self.manifest.seeds.insert(role.to_string(), seed);
        self
    }

    pub fn dataset(&mut self, path: &Path) -> Result<&mut Self> {
        self.manifest
            .dataset_digests
            .insert(path.display().to_string(), file_digest(path)?);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.manifest.output_paths.push(path.display().to_string());
        self
    }

    /// Stamp the end time and write the manifest JSON.
    pub fn write(mut self, path: &PathBuf) -> Result<()> {
        self.manifest.finished = now();
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}
