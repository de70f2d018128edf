//! Implementations of the five subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use patchcast::baselines::{PatchTstConfig, TcnConfig};
use patchcast::data_io::{
    load_dataset, load_electricity, load_encoder, load_model, normalize_and_window, save_dataset,
    save_encoder, save_model, DatasetKind, DatasetManifest, DatasetSource, ElectricityConfig,
};
use patchcast::encoder::EncoderConfig;
use patchcast::error::{Error, Result};
use patchcast::forecaster::ForecasterConfig;
use patchcast::synthgen::{generate_dataset, SeriesSample, SynthConfig};
use patchcast::training::{
    evaluate as run_evaluation, train_baseline, train_stage1, train_stage2, BaselineConfig,
    BaselineModel, MetricsReport, Model, TrainConfig, TrainLog,
};
use serde::{Deserialize, Serialize};

use crate::config::{resolve, FileConfig};
use crate::manifest::ManifestBuilder;
use crate::{CompareArgs, ElectricityArgs, EvaluateArgs, GenerateArgs, ModelKind, TrainArgs};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn json_value<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes")
}

// ── generate ────────────────────────────────────────────────────────────

pub fn generate(args: GenerateArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    ensure_dir(&args.common.out)?;

    let default_n = if args.common.desk_scale { 500 } else { 10_000 };
    let base = SynthConfig::default();
    let train_cfg = SynthConfig {
        num_samples: resolve(args.n, file.n, default_n),
        seq_len: resolve(args.t, file.t, base.seq_len),
        alpha1: resolve(args.alpha1, file.alpha1, base.alpha1),
        alpha2: resolve(args.alpha2, file.alpha2, base.alpha2),
        alpha3: resolve(args.alpha3, file.alpha3, base.alpha3),
        sigma1: resolve(args.sigma1, file.sigma1, base.sigma1),
        sigma2: resolve(args.sigma2, file.sigma2, base.sigma2),
        sigma_y: resolve(args.sigma_y, file.sigma_y, base.sigma_y),
        rho: resolve(args.rho, file.rho, base.rho),
        seed: resolve(args.train_seed, file.train_seed, 42),
    };
    let test_cfg = SynthConfig {
        seed: resolve(args.test_seed, file.test_seed, 101),
        ..train_cfg.clone()
    };

    let mut manifest = ManifestBuilder::new("generate");
    manifest
        .config(serde_json::json!({ "train": train_cfg, "test": test_cfg }))
        .seed("train", train_cfg.seed)
        .seed("test", test_cfg.seed);

    for (name, cfg) in [
        ("synthetic-train.pcds", &train_cfg),
        ("synthetic-test.pcds", &test_cfg),
    ] {
        let samples = generate_dataset(cfg)?;
        let path = args.common.out.join(name);
        let dataset_manifest = DatasetManifest {
            schema_version: 1,
            kind: DatasetKind::Synthetic,
            num_samples: cfg.num_samples,
            seq_len: cfg.seq_len,
            num_features: patchcast::synthgen::NUM_FEATURES,
            source: DatasetSource::Seed(cfg.seed),
            config: json_value(cfg),
            created: None, // kept unset so identical flags give identical bytes
        };
        save_dataset(&samples, &dataset_manifest, &path)?;
        log::info!("wrote {} ({} samples)", path.display(), cfg.num_samples);
        manifest.dataset(&path)?.output(&path);
    }
    manifest.write(&args.common.out.join("generate.manifest.json"))
}

// ── train ───────────────────────────────────────────────────────────────

fn write_loss_csv(path: &Path, log: &TrainLog) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (epoch, loss) in log {
        let _ = writeln!(text, "{epoch},{loss}");
    }
    write_text(path, &text)
}

struct TrainSettings {
    train: TrainConfig,
    patch_len: usize,
    horizon: usize,
}

fn resolve_training(args: &TrainArgs, file: &FileConfig) -> TrainSettings {
    let preset = if args.common.desk_scale {
        TrainConfig::desk_scale(args.seed)
    } else {
        TrainConfig {
            seed: args.seed,
            ..TrainConfig::default()
        }
    };
    TrainSettings {
        train: TrainConfig {
            lr: resolve(args.lr, file.lr, preset.lr),
            batch_size: resolve(args.batch_size, file.batch_size, preset.batch_size),
            stage1_epochs: resolve(args.stage1_epochs, file.stage1_epochs, preset.stage1_epochs),
            stage2_epochs: resolve(args.stage2_epochs, file.stage2_epochs, preset.stage2_epochs),
            baseline_epochs: resolve(
                args.baseline_epochs,
                file.baseline_epochs,
                preset.baseline_epochs,
            ),
            seed: args.seed,
        },
        patch_len: resolve(args.patch_len, file.patch_len, 8),
        horizon: resolve(args.horizon, file.horizon, 1),
    }
}

fn architecture_configs(
    num_features: usize,
    seq_len: usize,
    patch_len: usize,
    horizon: usize,
) -> (EncoderConfig, ForecasterConfig, TcnConfig, PatchTstConfig) {
    let num_patches = seq_len / patch_len.max(1);
    let max_patches = num_patches.max(64);
    let enc = EncoderConfig {
        patch_len,
        in_features: num_features,
        ..EncoderConfig::default()
    };
    let fc = ForecasterConfig {
        horizon,
        max_patches,
        ..ForecasterConfig::default()
    };
    let tcn = TcnConfig {
        patch_len,
        horizon,
        in_features: num_features,
        ..TcnConfig::default()
    };
    let pt = PatchTstConfig {
        patch_len,
        horizon,
        in_features: num_features,
        max_patches,
        ..PatchTstConfig::default()
    };
    (enc, fc, tcn, pt)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    ensure_dir(&args.common.out)?;
    let settings = resolve_training(&args, &file);
    let (samples, data_manifest) = load_dataset(&args.data)?;
    let (enc_cfg, fc_cfg, tcn_cfg, pt_cfg) = architecture_configs(
        data_manifest.num_features,
        data_manifest.seq_len,
        settings.patch_len,
        settings.horizon,
    );

    let mut manifest = ManifestBuilder::new("train");
    manifest.seed("train", args.seed).dataset(&args.data)?;

    match args.model {
        ModelKind::Proposed => {
            manifest.config(serde_json::json!({
                "model": "proposed",
                "encoder": enc_cfg,
                "forecaster": fc_cfg,
                "training": settings.train,
                "reused_encoder": args.encoder.as_ref().map(|p| p.display().to_string()),
            }));

            let encoder = match &args.encoder {
                Some(path) => {
                    log::info!("reusing frozen encoder from {}", path.display());
                    load_encoder(path)?
                }
                None => {
                    let mut stage1_log = TrainLog::new();
                    let outcome = train_stage1(
                        &samples,
                        &enc_cfg,
                        settings.horizon,
                        &settings.train,
                        &mut stage1_log,
                    );
                    let csv = args.common.out.join("proposed-stage1-loss.csv");
                    write_loss_csv(&csv, &stage1_log)?; // partial curve survives divergence
                    manifest.output(&csv);
                    outcome?
                }
            };
            let encoder_path = args.common.out.join("encoder.pckp");
            save_encoder(&encoder_path, &encoder)?;
            manifest.output(&encoder_path);

            let mut stage2_log = TrainLog::new();
            let outcome = train_stage2(
                &samples,
                &encoder,
                &fc_cfg,
                &settings.train,
                &mut stage2_log,
            );
            let csv = args.common.out.join("proposed-stage2-loss.csv");
            write_loss_csv(&csv, &stage2_log)?;
            manifest.output(&csv);
            let forecaster = outcome?;

            let model = Model::proposed(encoder, forecaster)?;
            let ckpt = args.common.out.join("proposed.pckp");
            save_model(&ckpt, &model)?;
            log::info!("wrote {}", ckpt.display());
            manifest.output(&ckpt);
        }
        ModelKind::Tcn | ModelKind::Patchtst => {
            let (name, cfg) = match args.model {
                ModelKind::Tcn => ("tcn", BaselineConfig::Tcn(tcn_cfg)),
                _ => ("patchtst", BaselineConfig::PatchTst(pt_cfg)),
            };
            manifest.config(serde_json::json!({
                "model": name,
                "config": cfg,
                "training": settings.train,
            }));
            let mut log_rows = TrainLog::new();
            let outcome = train_baseline(&samples, &cfg, &settings.train, &mut log_rows);
            let csv = args.common.out.join(format!("{name}-loss.csv"));
            write_loss_csv(&csv, &log_rows)?;
            manifest.output(&csv);
            let model = match outcome? {
                BaselineModel::Tcn(m) => Model::Tcn(m),
                BaselineModel::PatchTst(m) => Model::PatchTst(m),
            };
            let ckpt = args.common.out.join(format!("{name}.pckp"));
            save_model(&ckpt, &model)?;
            log::info!("wrote {}", ckpt.display());
            manifest.output(&ckpt);
        }
    }
    manifest.write(&args.common.out.join("train.manifest.json"))
}

// ── evaluate ────────────────────────────────────────────────────────────

/// Evaluation report as written to disk: the metrics plus the identity of
/// the dataset they were computed on.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub model_name: String,
    pub mse: f64,
    pub mae: f64,
    pub num_eval_pairs: usize,
    pub config_hash: String,
    pub dataset_path: String,
    pub dataset_digest: String,
}

impl EvaluationRecord {
    fn new(report: MetricsReport, dataset_path: &Path, digest: String) -> Self {
        EvaluationRecord {
            model_name: report.model_name,
            mse: report.mse,
            mae: report.mae,
            num_eval_pairs: report.num_eval_pairs,
            config_hash: report.config_hash,
            dataset_path: dataset_path.display().to_string(),
            dataset_digest: digest,
        }
    }
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let (samples, _) = load_dataset(&args.data)?;
    let report = run_evaluation(&model, &samples)?;

    let out = args.out.unwrap_or_else(|| {
        let stem = args
            .checkpoint
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model");
        args.checkpoint
            .with_file_name(format!("{stem}-metrics.json"))
    });
    let digest = patchcast::data_io::file_digest(&args.data)?;
    let record = EvaluationRecord::new(report, &args.data, digest);
    write_text(
        &out,
        &serde_json::to_string_pretty(&record).expect("record serializes"),
    )?;
    println!(
        "{}: mse {:.6}, mae {:.6} over {} pairs",
        record.model_name, record.mse, record.mae, record.num_eval_pairs
    );

    let mut manifest = ManifestBuilder::new("evaluate");
    manifest
        .config(serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "config_hash": record.config_hash,
        }))
        .dataset(&args.data)?
        .output(&out);
    manifest.write(&out.with_extension("manifest.json"))
}

// ── compare ─────────────────────────────────────────────────────────────

fn comparison_table(records: &[EvaluationRecord]) -> (String, String) {
    let mut rows: Vec<&EvaluationRecord> = records.iter().collect();
    rows.sort_by(|a, b| a.mse.partial_cmp(&b.mse).expect("finite metrics"));

    let mut text = format!(
        "{:<12} {:>12} {:>12} {:>8}\n",
        "model", "mse", "mae", "pairs"
    );
    let mut csv = String::from("model,mse,mae,num_eval_pairs,config_hash\n");
    for r in rows {
        let _ = writeln!(
            text,
            "{:<12} {:>12.6} {:>12.6} {:>8}",
            r.model_name, r.mse, r.mae, r.num_eval_pairs
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.model_name, r.mse, r.mae, r.num_eval_pairs, r.config_hash
        );
    }
    (text, csv)
}

pub fn compare(args: CompareArgs) -> Result<()> {
    ensure_dir(&args.common.out)?;
    let mut manifest = ManifestBuilder::new("compare");

    let records: Vec<EvaluationRecord> = if args.end_to_end {
        let file = FileConfig::load(args.common.config.as_deref())?;
        let train_path = args
            .train_data
            .as_ref()
            .ok_or_else(|| Error::Config("--end-to-end requires --train-data".to_string()))?;
        let test_path = args
            .test_data
            .as_ref()
            .ok_or_else(|| Error::Config("--end-to-end requires --test-data".to_string()))?;
        let (train_samples, train_manifest) = load_dataset(train_path)?;
        let (test_samples, _) = load_dataset(test_path)?;
        manifest
            .dataset(train_path)?
            .dataset(test_path)?
            .seed("train", args.seed);

        let preset = if args.common.desk_scale {
            TrainConfig::desk_scale(args.seed)
        } else {
            TrainConfig {
                seed: args.seed,
                ..TrainConfig::default()
            }
        };
        let train_cfg = TrainConfig {
            lr: resolve(None, file.lr, preset.lr),
            batch_size: resolve(None, file.batch_size, preset.batch_size),
            stage1_epochs: resolve(None, file.stage1_epochs, preset.stage1_epochs),
            stage2_epochs: resolve(None, file.stage2_epochs, preset.stage2_epochs),
            baseline_epochs: resolve(None, file.baseline_epochs, preset.baseline_epochs),
            seed: args.seed,
        };
        let patch_len = resolve(args.patch_len, file.patch_len, 8);
        let horizon = resolve(args.horizon, file.horizon, 1);
        let (enc_cfg, fc_cfg, tcn_cfg, pt_cfg) = architecture_configs(
            train_manifest.num_features,
            train_manifest.seq_len,
            patch_len,
            horizon,
        );
        manifest.config(serde_json::json!({
            "training": train_cfg,
            "encoder": enc_cfg,
            "forecaster": fc_cfg,
            "tcn": tcn_cfg,
            "patchtst": pt_cfg,
        }));
        let digest = patchcast::data_io::file_digest(test_path)?;

        let mut records = Vec::new();
        log::info!("training proposed (stage 1 + stage 2)");
        let mut log_rows = TrainLog::new();
        let encoder = train_stage1(&train_samples, &enc_cfg, horizon, &train_cfg, &mut log_rows)?;
        let forecaster =
            train_stage2(&train_samples, &encoder, &fc_cfg, &train_cfg, &mut log_rows)?;
        let proposed = Model::proposed(encoder, forecaster)?;
        records.push(EvaluationRecord::new(
            run_evaluation(&proposed, &test_samples)?,
            test_path,
            digest.clone(),
        ));

        for cfg in [
            BaselineConfig::Tcn(tcn_cfg),
            BaselineConfig::PatchTst(pt_cfg),
        ] {
            let name = match &cfg {
                BaselineConfig::Tcn(_) => "tcn",
                BaselineConfig::PatchTst(_) => "patchtst",
            };
            log::info!("training {name}");
            let mut log_rows = TrainLog::new();
            let model = match train_baseline(&train_samples, &cfg, &train_cfg, &mut log_rows)? {
                BaselineModel::Tcn(m) => Model::Tcn(m),
                BaselineModel::PatchTst(m) => Model::PatchTst(m),
            };
            records.push(EvaluationRecord::new(
                run_evaluation(&model, &test_samples)?,
                test_path,
                digest.clone(),
            ));
        }
        records
    } else {
        if args.reports.len() < 2 {
            return Err(Error::Config(format!(
                "compare needs at least two --reports (got {}) or --end-to-end",
                args.reports.len()
            )));
        }
        manifest.config(serde_json::json!({
            "reports": args.reports.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        }));
        args.reports
            .iter()
            .map(|path| {
                let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("report {}: {e}", path.display())))
            })
            .collect::<Result<_>>()?
    };

    let (text, csv) = comparison_table(&records);
    print!("{text}");
    let txt_path = args.common.out.join("compare.txt");
    let csv_path = args.common.out.join("compare.csv");
    write_text(&txt_path, &text)?;
    write_text(&csv_path, &csv)?;
    manifest.output(&txt_path).output(&csv_path);
    manifest.write(&args.common.out.join("compare.manifest.json"))
}

// ── electricity-prepare ─────────────────────────────────────────────────

fn default_split(timestamps: &[NaiveDateTime]) -> Result<NaiveDateTime> {
    let last = timestamps
        .last()
        .ok_or_else(|| Error::Config("no rows in the source file".to_string()))?;
    NaiveDate::from_ymd_opt(last.year(), 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .ok_or_else(|| Error::Config("could not derive a split boundary".to_string()))
}

pub fn electricity_prepare(args: ElectricityArgs) -> Result<()> {
    ensure_dir(&args.common.out)?;
    let raw = load_electricity(&args.source)?;

    let input_meters = if args.input_meters.is_empty() {
        // Target plus the first five other meters, in file order.
        let mut meters = vec![args.target_meter.clone()];
        meters.extend(
            raw.meters
                .iter()
                .filter(|m| **m != args.target_meter)
                .take(5)
                .cloned(),
        );
        meters
    } else {
        args.input_meters.clone()
    };
    let split_boundary = match &args.split {
        Some(text) => NaiveDateTime::parse_from_str(text, "%Y-%m-%d %H:%M:%S")
            .map_err(|e| Error::Config(format!("--split {text:?}: {e}")))?,
        None => default_split(&raw.timestamps)?,
    };
    let window = args.window.unwrap_or(160);
    let cfg = ElectricityConfig {
        source: args.source.display().to_string(),
        target_meter: args.target_meter.clone(),
        input_meters,
        window_len: window,
        train_stride: args.train_stride.unwrap_or(window / 2),
        test_stride: args.test_stride.unwrap_or(window),
        split_boundary,
        patch_len: args.patch_len.unwrap_or(8),
        horizon: args.horizon.unwrap_or(1),
    };

    let (train, test, stats) = normalize_and_window(&raw, &cfg)?;
    log::info!(
        "windowed {} train and {} test samples ({} features)",
        train.len(),
        test.len(),
        train[0].x.shape()[1]
    );

    let source_digest = patchcast::data_io::file_digest(&args.source)?;
    let mut manifest = ManifestBuilder::new("electricity-prepare");
    manifest.config(serde_json::json!({ "windowing": cfg, "stats": stats }));

    let save = |samples: &[SeriesSample], name: &str| -> Result<PathBuf> {
        let path = args.common.out.join(name);
        let dm = DatasetManifest {
            schema_version: 1,
            kind: DatasetKind::Electricity,
            num_samples: samples.len(),
            seq_len: cfg.window_len,
            num_features: samples[0].x.shape()[1],
            source: DatasetSource::SourceDigest(source_digest.clone()),
            config: json_value(&cfg),
            created: None,
        };
        save_dataset(samples, &dm, &path)?;
        Ok(path)
    };
    let train_path = save(&train, "electricity-train.pcds")?;
    let test_path = save(&test, "electricity-test.pcds")?;
    let stats_path = args.common.out.join("meter-stats.json");
    write_text(
        &stats_path,
        &serde_json::to_string_pretty(&stats).expect("stats serialize"),
    )?;

    manifest
        .dataset(&train_path)?
        .dataset(&test_path)?
        .output(&train_path)
        .output(&test_path)
        .output(&stats_path);
    manifest.write(&args.common.out.join("electricity.manifest.json"))
}
