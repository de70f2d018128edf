//! Persistence: binary dataset containers, model checkpoints, and ingestion
//! of raw electricity meter readings.
//!
//! Dataset container (`PCDS`): magic, version `u16`, length-prefixed UTF-8
//! JSON manifest, then `N*T*F` little-endian `f64` inputs followed by `N*T`
//! targets. Checkpoint container (`PCKP`): magic, version, length-prefixed
//! JSON model spec, tensor count, then named tensors
//! (`name_len u32, name, rank u32, dims u64.., f64 data`), all little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDateTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{PatchTstConfig, PatchTstModel, TcnConfig, TcnModel};
use crate::encoder::{EncoderConfig, PatchEncoder};
use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, ForecasterConfig};
use crate::numerics::{ParamSet, Tensor};
use crate::synthgen::SeriesSample;
use crate::training::Model;

const DATASET_MAGIC: &[u8; 4] = b"PCDS";
const DATASET_VERSION: u16 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"PCKP";
const CHECKPOINT_VERSION: u16 = 1;

/// Where a dataset came from: a generator seed or a digest of source bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Synthetic generation seed.
    Seed(u64),
    /// SHA-256 of the raw source file.
    SourceDigest(String),
}

/// Dataset family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Generated by the synthetic benchmark generator.
    Synthetic,
    /// Windowed electricity meter readings.
    Electricity,
}

/// Self-describing header embedded in every dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Manifest schema version.
    pub schema_version: u32,
    /// Dataset family.
    pub kind: DatasetKind,
    /// Sample count N.
    pub num_samples: usize,
    /// Time steps per sample T.
    pub seq_len: usize,
    /// Features per step F.
    pub num_features: usize,
    /// Generating seed or source digest.
    pub source: DatasetSource,
    /// Full generating/windowing configuration.
    pub config: serde_json::Value,
    /// Creation timestamp (RFC 3339). Left unset by the generator so that
    /// identical flags produce byte-identical files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::io(path.display().to_string(), source)
}

/// Write samples and manifest to the binary container format.
pub fn save_dataset(
    samples: &[SeriesSample],
    manifest: &DatasetManifest,
    path: &Path,
) -> Result<()> {
    if samples.len() != manifest.num_samples {
        return Err(Error::Integrity(format!(
            "manifest declares {} samples but {} were provided",
            manifest.num_samples,
            samples.len()
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.x.shape() != [manifest.seq_len, manifest.num_features] || s.y.len() != manifest.seq_len
        {
            return Err(Error::Integrity(format!(
                "sample {i} has shape {:?}/y-len {} but manifest declares T={}, F={}",
                s.x.shape(),
                s.y.len(),
                manifest.seq_len,
                manifest.num_features
            )));
        }
    }
    let manifest_json = serde_json::to_vec(manifest).expect("manifest serializes");

    let mut buf = Vec::with_capacity(
        4 + 2
            + 4
            + manifest_json.len()
            + samples.len() * manifest.seq_len * (manifest.num_features + 1) * 8,
    );
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest_json);
    for s in samples {
        for v in s.x.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in samples {
        for v in &s.y {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "file truncated: needed {n} bytes for {what} at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after declared payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Exact inverse of [`save_dataset`]; validates magic, version, and declared
/// sizes before reading tensors.
pub fn load_dataset(path: &Path) -> Result<(Vec<SeriesSample>, DatasetManifest)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "not a dataset container: magic {:?} (expected {:?})",
            magic, DATASET_MAGIC
        )));
    }
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let manifest_len = r.u32("manifest length")? as usize;
    let manifest_json = r.take(manifest_len, "manifest")?;
    let manifest: DatasetManifest = serde_json::from_slice(manifest_json)
        .map_err(|e| Error::Format(format!("manifest is not valid JSON: {e}")))?;

    let (n, t, f) = (
        manifest.num_samples,
        manifest.seq_len,
        manifest.num_features,
    );
    let expected = n * t * f * 8 + n * t * 8;
    if bytes.len() - r.pos != expected {
        return Err(Error::Integrity(format!(
            "payload is {} bytes but manifest (N={n}, T={t}, F={f}) implies {expected}",
            bytes.len() - r.pos
        )));
    }
    let x_flat = r.f64_vec(n * t * f, "inputs")?;
    let y_flat = r.f64_vec(n * t, "targets")?;
    r.finish()?;

    let samples = (0..n)
        .map(|i| {
            let x = Tensor::new(vec![t, f], x_flat[i * t * f..(i + 1) * t * f].to_vec())?;
            Ok(SeriesSample {
                x,
                y: y_flat[i * t..(i + 1) * t].to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, manifest))
}

/// Model architecture tag plus configuration, stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointSpec {
    /// Stage-1 encoder only.
    Encoder {
        /// Encoder hyperparameters.
        config: EncoderConfig,
    },
    /// Frozen encoder plus trained forecaster.
    Proposed {
        /// Encoder hyperparameters.
        encoder: EncoderConfig,
        /// Forecaster hyperparameters.
        forecaster: ForecasterConfig,
    },
    /// TCN baseline.
    Tcn {
        /// TCN hyperparameters.
        config: TcnConfig,
    },
    /// Patch-Transformer baseline.
    PatchTst {
        /// Model hyperparameters.
        config: PatchTstConfig,
    },
}

/// Write a checkpoint: spec JSON plus every named tensor of the given
/// parameter sets (names must be globally unique).
pub fn save_checkpoint(path: &Path, spec: &CheckpointSpec, params: &[&ParamSet]) -> Result<()> {
    let spec_json = serde_json::to_vec(spec).expect("spec serializes");
    let count: usize = params.iter().map(|p| p.len()).sum();

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec_json);
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for set in params {
        for (name, tensor) in set.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read a checkpoint back into its spec and named tensors.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointSpec, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint: magic {:?} (expected {:?})",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let spec_len = r.u32("spec length")? as usize;
    let spec_json = r.take(spec_len, "spec")?;
    let spec: CheckpointSpec = serde_json::from_slice(spec_json)
        .map_err(|e| Error::Format(format!("checkpoint spec is not valid JSON: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64_vec(numel, "tensor data")?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    Ok((spec, tensors))
}

fn restore_params(set: &mut ParamSet, tensors: &[(String, Tensor)]) -> Result<usize> {
    let mut applied = 0;
    for (name, tensor) in tensors {
        if let Some(slot) = set.slot(name) {
            set.set_tensor(slot, tensor.clone())?;
            applied += 1;
        }
    }
    Ok(applied)
}

/// Persist a trained model with its architecture tag.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    match model {
        Model::Proposed {
            encoder,
            forecaster,
        } => save_checkpoint(
            path,
            &CheckpointSpec::Proposed {
                encoder: encoder.config().clone(),
                forecaster: forecaster.config().clone(),
            },
            &[encoder.params(), forecaster.params()],
        ),
        Model::Tcn(m) => save_checkpoint(
            path,
            &CheckpointSpec::Tcn {
                config: m.config().clone(),
            },
            &[m.params()],
        ),
        Model::PatchTst(m) => save_checkpoint(
            path,
            &CheckpointSpec::PatchTst {
                config: m.config().clone(),
            },
            &[m.params()],
        ),
    }
}

/// Persist a stage-1 encoder on its own.
pub fn save_encoder(path: &Path, encoder: &PatchEncoder) -> Result<()> {
    save_checkpoint(
        path,
        &CheckpointSpec::Encoder {
            config: encoder.config().clone(),
        },
        &[encoder.params()],
    )
}

fn check_applied(applied: usize, expected: usize, tensors: usize) -> Result<()> {
    if applied != expected || tensors != expected {
        return Err(Error::Integrity(format!(
            "checkpoint holds {tensors} tensors, model needs {expected}, {applied} matched by name"
        )));
    }
    Ok(())
}

/// Rebuild a stage-1 encoder from a checkpoint (spec kind must be
/// `encoder`).
pub fn load_encoder(path: &Path) -> Result<PatchEncoder> {
    let (spec, tensors) = load_checkpoint(path)?;
    match spec {
        CheckpointSpec::Encoder { config } => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut encoder = PatchEncoder::new(config, &mut rng)?;
            let applied = restore_params(encoder.params_mut(), &tensors)?;
            check_applied(applied, encoder.params().len(), tensors.len())?;
            Ok(encoder)
        }
        _ => Err(Error::Format(
            "checkpoint does not hold a stage-1 encoder".to_string(),
        )),
    }
}

/// Rebuild any trained model from a checkpoint.
pub fn load_model(path: &Path) -> Result<Model> {
    let (spec, tensors) = load_checkpoint(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match spec {
        CheckpointSpec::Encoder { .. } => Err(Error::Format(
            "checkpoint holds a bare encoder, not an evaluable model".to_string(),
        )),
        CheckpointSpec::Proposed {
            encoder,
            forecaster,
        } => {
            let mut enc = PatchEncoder::new(encoder, &mut rng)?;
            let mut fc = Forecaster::new(forecaster, &mut rng)?;
            let applied = restore_params(enc.params_mut(), &tensors)?
                + restore_params(fc.params_mut(), &tensors)?;
            check_applied(
                applied,
                enc.params().len() + fc.params().len(),
                tensors.len(),
            )?;
            Model::proposed(enc, fc)
        }
        CheckpointSpec::Tcn { config } => {
            let mut m = TcnModel::new(config, &mut rng)?;
            let applied = restore_params(m.params_mut(), &tensors)?;
            check_applied(applied, m.params().len(), tensors.len())?;
            Ok(Model::Tcn(m))
        }
        CheckpointSpec::PatchTst { config } => {
            let mut m = PatchTstModel::new(config, &mut rng)?;
            let applied = restore_params(m.params_mut(), &tensors)?;
            check_applied(applied, m.params().len(), tensors.len())?;
            Ok(Model::PatchTst(m))
        }
    }
}

/// SHA-256 of a file, for manifests and run records.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

// ── Electricity ingestion ───────────────────────────────────────────────

/// Raw electricity readings: one row per timestamp, one column per meter.
#[derive(Clone, Debug)]
pub struct ElectricityRaw {
    /// Timestamps, strictly in file order.
    pub timestamps: Vec<NaiveDateTime>,
    /// Meter names from the header (or synthesized `m0..` when absent).
    pub meters: Vec<String>,
    /// `readings[row][meter]`.
    pub readings: Vec<Vec<f64>>,
}

/// Windowing and normalization settings for the electricity data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectricityConfig {
    /// Path of the raw source file (recorded in manifests).
    pub source: String,
    /// Meter whose patch-level average load is forecast.
    pub target_meter: String,
    /// Meters used as input features (target customarily included).
    pub input_meters: Vec<String>,
    /// Window length T.
    pub window_len: usize,
    /// Stride between training windows.
    pub train_stride: usize,
    /// Stride between test windows.
    pub test_stride: usize,
    /// Rows at or before this timestamp are training data; test windows
    /// start strictly after it.
    pub split_boundary: NaiveDateTime,
    /// Patch length used downstream.
    pub patch_len: usize,
    /// Forecast horizon in patches.
    pub horizon: usize,
}

impl ElectricityConfig {
    /// Defaults: T = 160, training stride T/2, test stride T, P = 8, h = 1.
    pub fn new(
        source: String,
        target_meter: String,
        input_meters: Vec<String>,
        split_boundary: NaiveDateTime,
    ) -> Self {
        ElectricityConfig {
            source,
            target_meter,
            input_meters,
            window_len: 160,
            train_stride: 80,
            test_stride: 160,
            split_boundary,
            patch_len: 8,
            horizon: 1,
        }
    }

    /// Validate window geometry.
    pub fn validate(&self) -> Result<()> {
        if self.window_len < self.patch_len {
            return Err(Error::config(format!(
                "window length {} is shorter than patch length {}",
                self.window_len, self.patch_len
            )));
        }
        if self.train_stride == 0 || self.test_stride == 0 {
            return Err(Error::config("strides must be >= 1".to_string()));
        }
        if self.input_meters.is_empty() {
            return Err(Error::config(
                "at least one input meter is required".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-meter normalization statistics fitted on the training split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeterStats {
    /// `(meter, mean, std)` for every retained meter.
    pub retained: Vec<(String, f64, f64)>,
    /// Meters dropped for zero variance on the training split.
    pub excluded: Vec<String>,
}

impl MeterStats {
    /// Stats for one meter, if retained.
    pub fn get(&self, meter: &str) -> Option<(f64, f64)> {
        self.retained
            .iter()
            .find(|(m, _, _)| m == meter)
            .map(|(_, mean, std)| (*mean, *std))
    }
}

fn parse_timestamp(field: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(field.trim_matches('"'), "%Y-%m-%d %H:%M:%S").ok()
}

/// Parse the published distribution format: semicolon-separated, first
/// column a timestamp, remaining columns one meter each, comma as the
/// decimal separator. A header row, when present, names the meters.
pub fn load_electricity(path: &Path) -> Result<ElectricityRaw> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());

    let (first_no, first_line) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        detail: "file has no rows".to_string(),
    })?;

    let mut meters: Vec<String> = Vec::new();
    let mut timestamps = Vec::new();
    let mut readings: Vec<Vec<f64>> = Vec::new();

    let mut parse_data_row = |line_no: usize, line: &str, meters: &mut Vec<String>| -> Result<()> {
        let mut fields = line.split(';');
        let ts_field = fields.next().unwrap_or("");
        let ts = parse_timestamp(ts_field).ok_or_else(|| Error::Parse {
            line: line_no + 1,
            detail: format!("column 1: {ts_field:?} is not a timestamp"),
        })?;
        let mut row = Vec::with_capacity(meters.len());
        for (col, field) in fields.enumerate() {
            let cleaned = field.trim_matches('"').replace(',', ".");
            let value: f64 = cleaned.parse().map_err(|_| Error::Parse {
                line: line_no + 1,
                detail: format!("column {}: {field:?} is not a number", col + 2),
            })?;
            row.push(value);
        }
        if meters.is_empty() {
            *meters = (0..row.len()).map(|i| format!("m{i}")).collect();
        }
        if row.len() != meters.len() {
            return Err(Error::Parse {
                line: line_no + 1,
                detail: format!(
                    "expected {} meter readings, found {}",
                    meters.len(),
                    row.len()
                ),
            });
        }
        timestamps.push(ts);
        readings.push(row);
        Ok(())
    };

    if parse_timestamp(first_line.split(';').next().unwrap_or("")).is_some() {
        // Headerless file: the first row is data.
        parse_data_row(first_no, first_line, &mut meters)?;
    } else {
        // Header row: consume the meter names.
        meters = first_line
            .split(';')
            .skip(1)
            .map(|name| name.trim_matches('"').to_string())
            .collect();
    }
    for (line_no, line) in lines {
        parse_data_row(line_no, line, &mut meters)?;
    }
    if readings.is_empty() {
        return Err(Error::Parse {
            line: 1,
            detail: "no data rows".to_string(),
        });
    }
    Ok(ElectricityRaw {
        timestamps,
        meters,
        readings,
    })
}

/// Z-score each selected meter with training-split statistics, then cut
/// sliding windows. Train windows end at or before the split boundary; test
/// windows start strictly after it.
pub fn normalize_and_window(
    raw: &ElectricityRaw,
    cfg: &ElectricityConfig,
) -> Result<(Vec<SeriesSample>, Vec<SeriesSample>, MeterStats)> {
    cfg.validate()?;
    let meter_index = |name: &str| -> Result<usize> {
        raw.meters
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::config(format!("meter {name:?} not present in the source file")))
    };
    let target_col = meter_index(&cfg.target_meter)?;
    let input_cols: Vec<(String, usize)> = cfg
        .input_meters
        .iter()
        .map(|m| Ok((m.clone(), meter_index(m)?)))
        .collect::<Result<_>>()?;

    // Rows with timestamp <= boundary form the fitting/training region.
    let train_rows = raw
        .timestamps
        .iter()
        .filter(|ts| **ts <= cfg.split_boundary)
        .count();
    if train_rows == 0 || train_rows == raw.timestamps.len() {
        return Err(Error::config(format!(
            "split boundary {} leaves no rows on one side ({} train rows of {})",
            cfg.split_boundary,
            train_rows,
            raw.timestamps.len()
        )));
    }

    let fit = |col: usize| -> (f64, f64) {
        let mean = (0..train_rows).map(|r| raw.readings[r][col]).sum::<f64>() / train_rows as f64;
        let var = (0..train_rows)
            .map(|r| {
                let d = raw.readings[r][col] - mean;
                d * d
            })
            .sum::<f64>()
            / train_rows as f64;
        (mean, var.sqrt())
    };

    let (target_mean, target_std) = fit(target_col);
    if target_std == 0.0 {
        return Err(Error::config(format!(
            "target meter {:?} has zero variance on the training split",
            cfg.target_meter
        )));
    }

    let mut stats = MeterStats {
        retained: vec![(cfg.target_meter.clone(), target_mean, target_std)],
        excluded: Vec::new(),
    };
    let mut kept_cols: Vec<(usize, f64, f64)> = Vec::new();
    for (name, col) in &input_cols {
        let (mean, std) = fit(*col);
        if std == 0.0 {
            log::warn!("excluding meter {name:?}: zero variance on the training split");
            stats.excluded.push(name.clone());
            continue;
        }
        if *name != cfg.target_meter {
            stats.retained.push((name.clone(), mean, std));
        }
        kept_cols.push((*col, mean, std));
    }
    if kept_cols.is_empty() {
        return Err(Error::config(
            "every input meter was excluded for zero variance".to_string(),
        ));
    }

    let window = |start: usize| -> SeriesSample {
        let t = cfg.window_len;
        let mut x = Vec::with_capacity(t * kept_cols.len());
        let mut y = Vec::with_capacity(t);
        for r in start..start + t {
            for (col, mean, std) in &kept_cols {
                x.push((raw.readings[r][*col] - mean) / std);
            }
            y.push((raw.readings[r][target_col] - target_mean) / target_std);
        }
        SeriesSample {
            x: Tensor::new(vec![t, kept_cols.len()], x).expect("window shape"),
            y,
        }
    };

    let mut train = Vec::new();
    let mut start = 0;
    while start + cfg.window_len <= train_rows {
        train.push(window(start));
        start += cfg.train_stride;
    }
    let mut test = Vec::new();
    let mut start = train_rows;
    while start + cfg.window_len <= raw.timestamps.len() {
        test.push(window(start));
        start += cfg.test_stride;
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::config(format!(
            "not enough rows for one window on each side of the split ({} train, {} test windows)",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, SynthConfig};
    use tempfile::tempdir;

    fn sample_manifest(n: usize, t: usize, f: usize) -> DatasetManifest {
        DatasetManifest {
            schema_version: 1,
            kind: DatasetKind::Synthetic,
            num_samples: n,
            seq_len: t,
            num_features: f,
            source: DatasetSource::Seed(42),
            config: serde_json::json!({"n": n, "t": t}),
            created: None,
        }
    }

    fn small_dataset(n: usize, t: usize) -> Vec<SeriesSample> {
        generate_dataset(&SynthConfig {
            num_samples: n,
            seq_len: t,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.pcds");
        let samples = small_dataset(3, 12);
        let manifest = sample_manifest(3, 12, 6);
        save_dataset(&samples, &manifest, &path).unwrap();
        let (loaded, loaded_manifest) = load_dataset(&path).unwrap();
        assert_eq!(samples, loaded);
        assert_eq!(manifest, loaded_manifest);
    }

    #[test]
    fn dataset_file_size_matches_layout_arithmetic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.pcds");
        let samples = small_dataset(2, 4);
        let manifest = sample_manifest(2, 4, 6);
        save_dataset(&samples, &manifest, &path).unwrap();
        let manifest_len = serde_json::to_vec(&manifest).unwrap().len();
        let expected = 4 + 2 + 4 + manifest_len + 2 * 4 * 6 * 8 + 2 * 4 * 8;
        assert_eq!(std::fs::metadata(&path).unwrap().len(), expected as u64);
    }

    #[test]
    fn truncated_dataset_is_an_integrity_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.pcds");
        let samples = small_dataset(2, 8);
        save_dataset(&samples, &sample_manifest(2, 8, 6), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "got {err:?}");
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.pcds");
        std::fs::write(&path, b"NOPE rest of file").unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
    }

    #[test]
    fn future_version_is_a_version_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.pcds");
        let samples = small_dataset(1, 4);
        save_dataset(&samples, &sample_manifest(1, 4, 6), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // bump version field
        std::fs::write(&path, &bytes).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(
            matches!(err, Error::Version { found: 99, .. }),
            "got {err:?}"
        );
    }

    #[test]
    fn corrupted_bytes_never_panic() {
        // Fuzz the container: flip one byte at a time across the header and
        // manifest region; every outcome must be Ok or a typed error.
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.pcds");
        let samples = small_dataset(1, 4);
        save_dataset(&samples, &sample_manifest(1, 4, 6), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let fuzz_path = dir.path().join("fuzzed.pcds");
        for i in 0..bytes.len().min(160) {
            let mut corrupted = bytes.clone();
            corrupted[i] ^= 0xA5;
            std::fs::write(&fuzz_path, &corrupted).unwrap();
            let _ = load_dataset(&fuzz_path);
        }
    }

    #[test]
    fn manifest_hash_is_stable_under_reserialization() {
        let manifest = sample_manifest(5, 16, 6);
        let json = serde_json::to_string(&manifest).unwrap();
        let back: DatasetManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(
            crate::training::config_hash(&manifest),
            crate::training::config_hash(&back)
        );
    }

    #[test]
    fn checkpoint_round_trip_restores_every_tensor() {
        use crate::encoder::EncoderConfig;
        let dir = tempdir().unwrap();
        let path = dir.path().join("enc.pckp");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let encoder = PatchEncoder::new(
            EncoderConfig {
                patch_len: 4,
                in_features: 6,
                conv_channels: vec![4],
                kernel_width: 3,
                num_dense_blocks: 1,
                token_dim: 8,
                refine_heads: 2,
                dropout_rate: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        save_encoder(&path, &encoder).unwrap();
        let loaded = load_encoder(&path).unwrap();
        assert_eq!(
            loaded.params().content_hash(),
            encoder.params().content_hash()
        );
        assert_eq!(loaded.config(), encoder.config());
    }

    #[test]
    fn model_checkpoint_round_trip_preserves_predictions() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tcn.pckp");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tcn = TcnModel::new(
            TcnConfig {
                levels: 2,
                channels: 4,
                kernel_width: 2,
                patch_len: 4,
                ..TcnConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let model = Model::Tcn(tcn);
        let sample = &small_dataset(1, 12)[0];
        let before = model.predict(sample).unwrap();
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.predict(sample).unwrap(), before);
        assert_eq!(loaded.name(), "tcn");
    }

    #[test]
    fn checkpoint_rejects_wrong_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pckp");
        std::fs::write(&path, b"XXXX123").unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            Error::Format(_)
        ));

        let good = dir.path().join("good.pckp");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tcn = TcnModel::new(TcnConfig::default(), &mut rng).unwrap();
        save_model(&good, &Model::Tcn(tcn)).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&good, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&good).unwrap_err(),
            Error::Integrity(_)
        ));
    }

    // ── Electricity ─────────────────────────────────────────────────────

    fn write_electricity_file(
        dir: &Path,
        rows: usize,
        meters: usize,
        constant_col: Option<usize>,
    ) -> std::path::PathBuf {
        let path = dir.join("readings.csv");
        let mut text = String::from("\"ts\"");
        for m in 0..meters {
            text.push_str(&format!(";\"MT_{m:03}\""));
        }
        text.push('\n');
        let base = chrono::NaiveDate::from_ymd_opt(2012, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        for r in 0..rows {
            let ts = base + chrono::Duration::minutes(15 * r as i64);
            text.push_str(&format!("\"{}\"", ts.format("%Y-%m-%d %H:%M:%S")));
            for m in 0..meters {
                let v = if Some(m) == constant_col {
                    1.0
                } else {
                    10.0 + (r as f64 * 0.25 + m as f64).sin() * 3.0 + m as f64
                };
                let s = format!("{v:.4}").replace('.', ",");
                text.push_str(&format!(";{s}"));
            }
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn decimal_commas_are_parsed() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.csv");
        std::fs::write(&path, "2012-01-01 00:15:00;1,25;0,00\n").unwrap();
        let raw = load_electricity(&path).unwrap();
        assert_eq!(raw.readings, vec![vec![1.25, 0.0]]);
        assert_eq!(raw.meters, vec!["m0", "m1"]);
    }

    #[test]
    fn header_row_is_consumed_not_parsed() {
        let dir = tempdir().unwrap();
        let path = write_electricity_file(dir.path(), 4, 2, None);
        let raw = load_electricity(&path).unwrap();
        assert_eq!(raw.meters, vec!["MT_000", "MT_001"]);
        assert_eq!(raw.readings.len(), 4);
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            load_electricity(&path).unwrap_err(),
            Error::Parse { .. }
        ));

        let header_only = dir.path().join("header.csv");
        std::fs::write(&header_only, "\"ts\";\"MT_000\"\n").unwrap();
        assert!(matches!(
            load_electricity(&header_only).unwrap_err(),
            Error::Parse { .. }
        ));
    }

    #[test]
    fn malformed_rows_name_line_and_column() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "2012-01-01 00:15:00;1,25;2,50\n2012-01-01 00:30:00;oops;2,50\n",
        )
        .unwrap();
        let err = load_electricity(&path).unwrap_err();
        match err {
            Error::Parse { line, detail } => {
                assert_eq!(line, 2);
                assert!(detail.contains("column 2"), "{detail}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn window_cfg(boundary_row: usize) -> ElectricityConfig {
        let base = chrono::NaiveDate::from_ymd_opt(2012, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        ElectricityConfig {
            source: "readings.csv".to_string(),
            target_meter: "MT_000".to_string(),
            input_meters: vec![
                "MT_000".to_string(),
                "MT_001".to_string(),
                "MT_002".to_string(),
            ],
            window_len: 16,
            train_stride: 8,
            test_stride: 16,
            split_boundary: base + chrono::Duration::minutes(15 * boundary_row as i64),
            patch_len: 4,
            horizon: 1,
        }
    }

    #[test]
    fn window_counts_follow_stride_arithmetic() {
        let dir = tempdir().unwrap();
        let path = write_electricity_file(dir.path(), 80 + 48, 3, None);
        let raw = load_electricity(&path).unwrap();
        let cfg = window_cfg(79); // rows 0..=79 are the training region
        let (train, test, _) = normalize_and_window(&raw, &cfg).unwrap();
        // Train region 80 rows, window 16, stride 8: starts 0,8,...,64.
        assert_eq!(train.len(), 9);
        // Test region 48 rows, stride 16: starts 80, 96, 112.
        assert_eq!(test.len(), 3);
        assert_eq!(train[0].x.shape(), &[16, 3]);
    }

    #[test]
    fn train_stats_differ_from_test_stats() {
        let dir = tempdir().unwrap();
        let path = write_electricity_file(dir.path(), 160, 3, None);
        let raw = load_electricity(&path).unwrap();
        let cfg = window_cfg(95);
        let (_, _, stats) = normalize_and_window(&raw, &cfg).unwrap();

        let (train_mean, _) = stats.get("MT_000").unwrap();
        let test_mean = (96..160).map(|r| raw.readings[r][0]).sum::<f64>() / 64.0;
        assert!(
            (train_mean - test_mean).abs() > 1e-6,
            "fixture should make the splits statistically distinct"
        );

        // The training region is exactly standardized; the test region,
        // normalized with training statistics, is not.
        let train_norm_mean = (0..96)
            .map(|r| (raw.readings[r][0] - train_mean) / stats.get("MT_000").unwrap().1)
            .sum::<f64>()
            / 96.0;
        assert!(train_norm_mean.abs() < 1e-9);
    }

    #[test]
    fn normalized_training_region_has_unit_stats() {
        let dir = tempdir().unwrap();
        let path = write_electricity_file(dir.path(), 160, 3, None);
        let raw = load_electricity(&path).unwrap();
        let cfg = window_cfg(95);
        let (_, _, stats) = normalize_and_window(&raw, &cfg).unwrap();
        for (meter, mean, std) in &stats.retained {
            let col = raw.meters.iter().position(|m| m == meter).unwrap();
            let normalized: Vec<f64> = (0..96)
                .map(|r| (raw.readings[r][col] - mean) / std)
                .collect();
            let m = normalized.iter().sum::<f64>() / 96.0;
            let v = normalized.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 96.0;
            assert!(m.abs() < 1e-9, "{meter} mean {m}");
            assert!((v.sqrt() - 1.0).abs() < 1e-9, "{meter} std {}", v.sqrt());
        }
    }

    #[test]
    fn constant_meter_is_excluded_with_reason() {
        let dir = tempdir().unwrap();
        let path = write_electricity_file(dir.path(), 160, 3, Some(2));
        let raw = load_electricity(&path).unwrap();
        let cfg = window_cfg(95);
        let (train, _, stats) = normalize_and_window(&raw, &cfg).unwrap();
        assert_eq!(stats.excluded, vec!["MT_002".to_string()]);
        assert_eq!(
            train[0].x.shape()[1],
            2,
            "constant meter must not appear as a feature"
        );
    }

    #[test]
    fn zero_variance_target_is_a_configuration_error() {
        let dir = tempdir().unwrap();
        let path = write_electricity_file(dir.path(), 160, 3, Some(0));
        let raw = load_electricity(&path).unwrap();
        let cfg = window_cfg(95);
        assert!(matches!(
            normalize_and_window(&raw, &cfg).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn no_test_window_touches_the_training_period() {
        let dir = tempdir().unwrap();
        let path = write_electricity_file(dir.path(), 200, 3, None);
        let raw = load_electricity(&path).unwrap();
        let cfg = window_cfg(99);
        let (_, test, stats) = normalize_and_window(&raw, &cfg).unwrap();
        // First test window starts at row 100; every row a test window draws
        // from must carry a timestamp strictly after the boundary.
        let first_test_row = 100;
        let (mean, std) = stats.get("MT_000").unwrap();
        for (w, sample) in test.iter().enumerate() {
            let start = first_test_row + w * cfg.test_stride;
            for t in 0..cfg.window_len {
                assert!(raw.timestamps[start + t] > cfg.split_boundary);
                let expected = (raw.readings[start + t][0] - mean) / std;
                assert_eq!(
                    sample.y[t], expected,
                    "window {w} step {t} drawn from the wrong row"
                );
            }
        }
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            // Round trips are bitwise lossless for arbitrary small datasets.
            #[test]
            fn dataset_round_trip(n in 1usize..4, t in 2usize..10, seed in 0u64..500) {
                let dir = tempdir().unwrap();
                let path = dir.path().join("rt.pcds");
                let samples = generate_dataset(&SynthConfig {
                    num_samples: n,
                    seq_len: t,
                    seed,
                    ..SynthConfig::default()
                }).unwrap();
                let manifest = DatasetManifest {
                    schema_version: 1,
                    kind: DatasetKind::Synthetic,
                    num_samples: n,
                    seq_len: t,
                    num_features: 6,
                    source: DatasetSource::Seed(seed),
                    config: serde_json::json!({"seed": seed}),
                    created: Some("2026-01-01T00:00:00Z".to_string()),
                };
                save_dataset(&samples, &manifest, &path).unwrap();
                let (loaded, loaded_manifest) = load_dataset(&path).unwrap();
                prop_assert_eq!(samples, loaded);
                prop_assert_eq!(manifest, loaded_manifest);
            }
        }
    }
}
