//! Times one epoch of each desk-scale training stage and projects full-run
//! wall time. Handy before committing to long experiments on a new machine.

use std::time::Instant;

use patchcast::baselines::{PatchTstConfig, TcnConfig};
use patchcast::encoder::EncoderConfig;
use patchcast::forecaster::ForecasterConfig;
use patchcast::synthgen::{generate_dataset, SynthConfig};
use patchcast::training::{
    train_baseline, train_stage1, train_stage2, BaselineConfig, TrainConfig, TrainLog,
};

fn main() {
    let n = 500;
    let data = generate_dataset(&SynthConfig {
        num_samples: n,
        seq_len: 160,
        seed: 42,
        ..SynthConfig::default()
    })
    .unwrap();
    println!("dataset: {n} samples of T=160");

    let probe_epochs = 2;
    let cfg = TrainConfig {
        stage1_epochs: probe_epochs,
        stage2_epochs: probe_epochs,
        baseline_epochs: probe_epochs,
        seed: 0,
        ..TrainConfig::default()
    };

    let mut log = TrainLog::new();
    let t0 = Instant::now();
    let encoder = train_stage1(&data, &EncoderConfig::default(), 1, &cfg, &mut log).unwrap();
    let stage1 = t0.elapsed().as_secs_f64() / probe_epochs as f64;
    println!(
        "stage1: {stage1:.2} s/epoch -> {:.1} min for 200 epochs",
        stage1 * 200.0 / 60.0
    );

    let t0 = Instant::now();
    let _ = train_stage2(
        &data,
        &encoder,
        &ForecasterConfig::default(),
        &cfg,
        &mut log,
    )
    .unwrap();
    let stage2 = t0.elapsed().as_secs_f64() / probe_epochs as f64;
    println!(
        "stage2: {stage2:.2} s/epoch -> {:.1} min for 100 epochs",
        stage2 * 100.0 / 60.0
    );

    let t0 = Instant::now();
    let _ = train_baseline(
        &data,
        &BaselineConfig::Tcn(TcnConfig::default()),
        &cfg,
        &mut log,
    )
    .unwrap();
    let tcn = t0.elapsed().as_secs_f64() / probe_epochs as f64;
    println!(
        "tcn:    {tcn:.2} s/epoch -> {:.1} min for 100 epochs",
        tcn * 100.0 / 60.0
    );

    let t0 = Instant::now();
    let _ = train_baseline(
        &data,
        &BaselineConfig::PatchTst(PatchTstConfig::default()),
        &cfg,
        &mut log,
    )
    .unwrap();
    let pt = t0.elapsed().as_secs_f64() / probe_epochs as f64;
    println!(
        "patchtst: {pt:.2} s/epoch -> {:.1} min for 100 epochs",
        pt * 100.0 / 60.0
    );

    let one_seed = stage1 * 200.0 + stage2 * 100.0 + tcn * 100.0;
    println!(
        "ordering experiment, one seed (stage1+stage2+tcn): {:.1} min",
        one_seed / 60.0
    );
    println!(
        "three seeds + one patchtst: {:.1} min",
        (3.0 * one_seed + pt * 100.0) / 60.0
    );
}
