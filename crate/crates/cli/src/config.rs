//! Optional JSON config file plus flag resolution.
//!
//! Precedence: command line > config file > built-in defaults. Every
//! resolved value is echoed into the run manifest.

use std::path::Path;

use patchcast::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Knobs a config file may set. Any field left out falls back to the
/// built-in default unless the command line overrides it.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub n: Option<usize>,
    pub t: Option<usize>,
    pub train_seed: Option<u64>,
    pub test_seed: Option<u64>,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub alpha3: Option<f64>,
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
    pub sigma_y: Option<f64>,
    pub rho: Option<f64>,
    pub patch_len: Option<usize>,
    pub horizon: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub baseline_epochs: Option<usize>,
}

impl FileConfig {
    /// Load from a JSON file; `None` path gives an empty overlay.
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.display().to_string(),
                    source: e,
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("config file {}: {e}", p.display())))
            }
        }
    }
}

/// command line > config file > default.
pub fn resolve<T: Copy>(cli: Option<T>, file: Option<T>, default: T) -> T {
    cli.or(file).unwrap_or(default)
}
