//! Two-stage training protocol, baseline training, and patch-level metrics.
//!
//! Stage 1 trains the patch encoder end-to-end with a temporary per-token
//! affine probe against horizon-aligned patch-mean targets; the probe is
//! discarded and the encoder frozen. Stage 2 trains the Transformer
//! forecaster on tokens produced by the frozen encoder. Baselines train
//! single-stage under the same batching, learning rate, and alignment.
//!
//! One model trains on one thread; evaluation fans out over samples with
//! read-only parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{PatchTstConfig, PatchTstModel, TcnConfig, TcnModel};
use crate::encoder::{EncoderConfig, PatchEncoder};
use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, ForecasterConfig};
use crate::numerics::{AdamW, ParamSet, Tape, Tensor, ValueId};
use crate::patching::{aggregate_targets, patchify, PatchSequence};
use crate::synthgen::SeriesSample;

/// Optimization settings shared by all stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// AdamW learning rate.
    pub lr: f64,
    /// Samples per mini-batch.
    pub batch_size: usize,
    /// Epochs for the stage-1 encoder.
    pub stage1_epochs: usize,
    /// Epochs for the stage-2 forecaster.
    pub stage2_epochs: usize,
    /// Epochs for single-stage baselines.
    pub baseline_epochs: usize,
    /// Seed for init, shuffling, and dropout streams.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            stage1_epochs: 2000,
            stage2_epochs: 300,
            baseline_epochs: 300,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: short enough for a full three-model comparison on
    /// one laptop core (pair with a few-hundred-sample dataset).
    pub fn desk_scale(seed: u64) -> Self {
        TrainConfig {
            stage1_epochs: 200,
            stage2_epochs: 100,
            baseline_epochs: 100,
            seed,
            ..TrainConfig::default()
        }
    }

    /// Validate ranges.
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1".to_string()));
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 || self.baseline_epochs == 0 {
            return Err(Error::config("every epoch count must be >= 1".to_string()));
        }
        Ok(())
    }

    fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// Per-epoch mean training loss, in epoch order (1-based epochs).
pub type TrainLog = Vec<(usize, f64)>;

/// Patch-level evaluation summary for one model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Model identifier (`proposed`, `tcn`, `patchtst`).
    pub model_name: String,
    /// Mean squared error over all predicted patches of all samples.
    pub mse: f64,
    /// Mean absolute error over the same set.
    pub mae: f64,
    /// Number of (prediction, target) pairs behind the averages.
    pub num_eval_pairs: usize,
    /// Hash of the model configuration that produced the forecasts.
    pub config_hash: String,
}

/// Patch-level MSE and MAE over per-sample forecast vectors.
pub fn mse_mae(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, f64)> {
    if preds.len() != targets.len() {
        return Err(Error::shape(
            "mse_mae",
            format!(
                "{} prediction vectors vs {} target vectors",
                preds.len(),
                targets.len()
            ),
        ));
    }
    let mut count = 0usize;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if p.len() != t.len() {
            return Err(Error::shape(
                "mse_mae",
                format!("sample {i}: {} predictions vs {} targets", p.len(), t.len()),
            ));
        }
        for (a, b) in p.iter().zip(t) {
            let d = a - b;
            sq += d * d;
            abs += d.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::config(
            "mse_mae: no prediction pairs to average".to_string(),
        ));
    }
    Ok((sq / count as f64, abs / count as f64))
}

/// Short stable hash of a serializable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("configs serialize");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

fn shuffled_epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Squared-error mean between a `[n, 1]` prediction column and labels.
fn sample_mse(tape: &mut Tape, preds: ValueId, labels: &[f64]) -> Result<ValueId> {
    let y = tape.constant(Tensor::new(vec![labels.len(), 1], labels.to_vec())?);
    let diff = tape.sub(preds, y)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

struct PreparedSample {
    patches: PatchSequence,
    labels: Vec<f64>, // targets at k+h for k = 0..K-h-1
}

fn prepare_samples(
    dataset: &[SeriesSample],
    patch_len: usize,
    horizon: usize,
) -> Result<Vec<PreparedSample>> {
    let prepared: Vec<PreparedSample> = dataset
        .iter()
        .map(|sample| {
            let patches = patchify(&sample.x, patch_len)?;
            let targets = aggregate_targets(&sample.y, patch_len)?;
            crate::patching::check_horizon(patches.num_patches(), horizon)?;
            Ok(PreparedSample {
                patches,
                labels: targets.values[horizon..].to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    let k = prepared[0].patches.num_patches();
    if prepared.iter().any(|p| p.patches.num_patches() != k) {
        return Err(Error::config(
            "training requires every sample to produce the same number of patches".to_string(),
        ));
    }
    Ok(prepared)
}

/// Concatenate per-sample label vectors for a batch, in batch order.
fn stack_labels(prepared: &[PreparedSample], batch: &[usize]) -> Vec<f64> {
    let mut labels = Vec::with_capacity(batch.len() * prepared[batch[0]].labels.len());
    for &i in batch {
        labels.extend_from_slice(&prepared[i].labels);
    }
    labels
}

/// Stage 1: train the patch encoder plus a temporary per-token affine probe
/// to regress horizon-aligned patch-mean targets; the probe is discarded.
/// Appends `(epoch, mean loss)` rows to `log` as epochs finish, so callers
/// keep partial curves if training diverges.
pub fn train_stage1(
    dataset: &[SeriesSample],
    enc_cfg: &EncoderConfig,
    horizon: usize,
    train_cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<PatchEncoder> {
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config(
            "stage 1 needs a non-empty dataset".to_string(),
        ));
    }
    let prepared = prepare_samples(dataset, enc_cfg.patch_len, horizon)?;

    let mut init_rng = train_cfg.stream(1);
    let mut encoder = PatchEncoder::new(enc_cfg.clone(), &mut init_rng)?;
    let mut probe = ParamSet::new();
    let probe_w = probe.add(
        "probe.weight",
        Tensor::xavier_uniform(
            &mut init_rng,
            vec![enc_cfg.token_dim, 1],
            enc_cfg.token_dim,
            1,
        ),
    );
    let probe_b = probe.add("probe.bias", Tensor::zeros(vec![1]));

    let mut shuffle_rng = train_cfg.stream(2);
    let mut dropout_rng = train_cfg.stream(3);
    let mut enc_opt = AdamW::new(train_cfg.lr);
    let mut probe_opt = AdamW::new(train_cfg.lr);

    let num_patches = prepared[0].patches.num_patches();
    let keep = num_patches - horizon;

    for epoch in 1..=train_cfg.stage1_epochs {
        let order = shuffled_epoch_order(prepared.len(), &mut shuffle_rng);
        let mut epoch_sq = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            let mut tape = Tape::new();
            let enc_binding = encoder.bind(&mut tape);
            let probe_binding = probe.bind(&mut tape);

            let mut rows = Vec::with_capacity(batch.len() * num_patches);
            for &i in batch {
                rows.extend(encoder.encode_token_rows(
                    &mut tape,
                    &enc_binding,
                    &prepared[i].patches,
                    Some(&mut dropout_rng),
                )?);
            }
            let tokens = tape.concat_rows(&rows)?;
            let refined = encoder.refine_tokens_grouped(
                &mut tape,
                &enc_binding,
                tokens,
                batch.len(),
                Some(&mut dropout_rng),
            )?;
            let scores = tape.matmul(refined, probe_binding.id(probe_w))?;
            let scores = tape.add_bias_row(scores, probe_binding.id(probe_b))?;
            let parts: Vec<_> = (0..batch.len())
                .map(|g| tape.slice_rows(scores, g * num_patches, g * num_patches + keep))
                .collect::<Result<_>>()?;
            let kept = tape.concat_rows(&parts)?;
            let loss = sample_mse(&mut tape, kept, &stack_labels(&prepared, batch))?;

            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_sq += loss_value * batch.len() as f64;
            tape.backward(loss)?;
            let enc_grads = encoder.params().collect_grads(&tape, &enc_binding);
            let probe_grads = probe.collect_grads(&tape, &probe_binding);
            enc_opt.step(encoder.params_mut(), &enc_grads)?;
            probe_opt.step(&mut probe, &probe_grads)?;
        }
        log.push((epoch, epoch_sq / prepared.len() as f64));
    }
    Ok(encoder)
}

/// Stage 2: train the forecaster on tokens from the frozen encoder. The
/// encoder never joins a stage-2 tape, so its parameters are bitwise
/// untouched (verify with `ParamSet::content_hash`).
pub fn train_stage2(
    dataset: &[SeriesSample],
    encoder: &PatchEncoder,
    fc_cfg: &ForecasterConfig,
    train_cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<Forecaster> {
    train_cfg.validate()?;
    fc_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config(
            "stage 2 needs a non-empty dataset".to_string(),
        ));
    }
    if fc_cfg.input_dim != encoder.config().token_dim {
        return Err(Error::config(format!(
            "forecaster input_dim {} does not match encoder token dim {}",
            fc_cfg.input_dim,
            encoder.config().token_dim
        )));
    }
    let patch_len = encoder.config().patch_len;
    let horizon = fc_cfg.horizon;
    let prepared = prepare_samples(dataset, patch_len, horizon)?;

    // Frozen tokens are fixed inputs; compute them once, in parallel.
    let tokens: Vec<Tensor> = prepared
        .par_iter()
        .map(|s| encoder.encode_sequence_value(&s.patches).map(|t| t.tokens))
        .collect::<Result<_>>()?;

    let mut init_rng = train_cfg.stream(4);
    let mut model = Forecaster::new(fc_cfg.clone(), &mut init_rng)?;
    let mut shuffle_rng = train_cfg.stream(5);
    let mut dropout_rng = train_cfg.stream(6);
    let mut opt = AdamW::new(train_cfg.lr);

    let num_patches = prepared[0].patches.num_patches();
    let token_dim = encoder.config().token_dim;

    for epoch in 1..=train_cfg.stage2_epochs {
        let order = shuffled_epoch_order(prepared.len(), &mut shuffle_rng);
        let mut epoch_sq = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);

            let mut stacked = Vec::with_capacity(batch.len() * num_patches * token_dim);
            for &i in batch {
                stacked.extend_from_slice(tokens[i].data());
            }
            let input = tape.constant(Tensor::new(
                vec![batch.len() * num_patches, token_dim],
                stacked,
            )?);
            let preds = model.forward_batch(
                &mut tape,
                &binding,
                input,
                num_patches,
                batch.len(),
                Some(&mut dropout_rng),
            )?;
            let loss = sample_mse(&mut tape, preds, &stack_labels(&prepared, batch))?;

            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_sq += loss_value * batch.len() as f64;
            tape.backward(loss)?;
            let grads = model.params().collect_grads(&tape, &binding);
            opt.step(model.params_mut(), &grads)?;
        }
        log.push((epoch, epoch_sq / prepared.len() as f64));
    }
    Ok(model)
}

/// Baseline model selection plus its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BaselineConfig {
    /// Temporal convolutional network.
    Tcn(TcnConfig),
    /// Patch-Transformer.
    PatchTst(PatchTstConfig),
}

/// A trained baseline.
pub enum BaselineModel {
    /// Temporal convolutional network.
    Tcn(TcnModel),
    /// Patch-Transformer.
    PatchTst(PatchTstModel),
}

/// Single-stage end-to-end training for a baseline under the same batch
/// size, learning rate, horizon, and data as the proposed model.
pub fn train_baseline(
    dataset: &[SeriesSample],
    cfg: &BaselineConfig,
    train_cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<BaselineModel> {
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config(
            "baseline training needs a non-empty dataset".to_string(),
        ));
    }
    let (patch_len, horizon) = match cfg {
        BaselineConfig::Tcn(c) => (c.patch_len, c.horizon),
        BaselineConfig::PatchTst(c) => (c.patch_len, c.horizon),
    };
    let prepared = prepare_samples(dataset, patch_len, horizon)?;
    let raw: Vec<&Tensor> = dataset.iter().map(|s| &s.x).collect();

    let mut init_rng = train_cfg.stream(7);
    let mut shuffle_rng = train_cfg.stream(8);
    let mut dropout_rng = train_cfg.stream(9);
    let mut opt = AdamW::new(train_cfg.lr);

    enum Either {
        Tcn(TcnModel),
        Pt(PatchTstModel),
    }
    let mut model = match cfg {
        BaselineConfig::Tcn(c) => Either::Tcn(TcnModel::new(c.clone(), &mut init_rng)?),
        BaselineConfig::PatchTst(c) => Either::Pt(PatchTstModel::new(c.clone(), &mut init_rng)?),
    };

    let seq_len = dataset[0].x.shape()[0];

    for epoch in 1..=train_cfg.baseline_epochs {
        let order = shuffled_epoch_order(prepared.len(), &mut shuffle_rng);
        let mut epoch_sq = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            let mut tape = Tape::new();
            let binding = match &model {
                Either::Tcn(m) => m.bind(&mut tape),
                Either::Pt(m) => m.bind(&mut tape),
            };
            let batch_raw: Vec<&Tensor> = batch.iter().map(|&i| raw[i]).collect();
            let preds = match &model {
                Either::Tcn(m) => {
                    let stacked =
                        tape.constant(crate::baselines::stack_channels_first(&batch_raw)?);
                    m.forward_batch(
                        &mut tape,
                        &binding,
                        stacked,
                        seq_len,
                        batch.len(),
                        Some(&mut dropout_rng),
                    )?
                }
                Either::Pt(m) => {
                    m.forward_batch(&mut tape, &binding, &batch_raw, Some(&mut dropout_rng))?
                }
            };
            let loss = sample_mse(&mut tape, preds, &stack_labels(&prepared, batch))?;

            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_sq += loss_value * batch.len() as f64;
            tape.backward(loss)?;
            match &mut model {
                Either::Tcn(m) => {
                    let grads = m.params().collect_grads(&tape, &binding);
                    opt.step(m.params_mut(), &grads)?;
                }
                Either::Pt(m) => {
                    let grads = m.params().collect_grads(&tape, &binding);
                    opt.step(m.params_mut(), &grads)?;
                }
            }
        }
        log.push((epoch, epoch_sq / prepared.len() as f64));
    }
    Ok(match model {
        Either::Tcn(m) => BaselineModel::Tcn(m),
        Either::Pt(m) => BaselineModel::PatchTst(m),
    })
}

/// Any trained model that can forecast a sample.
#[allow(clippy::large_enum_variant)]
pub enum Model {
    /// Frozen encoder plus trained forecaster.
    Proposed {
        /// Stage-1 patch encoder.
        encoder: PatchEncoder,
        /// Stage-2 Transformer.
        forecaster: Forecaster,
    },
    /// Temporal convolutional network baseline.
    Tcn(TcnModel),
    /// Patch-Transformer baseline.
    PatchTst(PatchTstModel),
}

impl Model {
    /// Pair an encoder and forecaster, checking dimensional agreement.
    pub fn proposed(encoder: PatchEncoder, forecaster: Forecaster) -> Result<Model> {
        if forecaster.config().input_dim != encoder.config().token_dim {
            return Err(Error::config(format!(
                "forecaster input_dim {} does not match encoder token dim {}",
                forecaster.config().input_dim,
                encoder.config().token_dim
            )));
        }
        Ok(Model::Proposed {
            encoder,
            forecaster,
        })
    }

    /// Stable identifier used in reports and file names.
    pub fn name(&self) -> &'static str {
        match self {
            Model::Proposed { .. } => "proposed",
            Model::Tcn(_) => "tcn",
            Model::PatchTst(_) => "patchtst",
        }
    }

    /// Patch length of the model's grid.
    pub fn patch_len(&self) -> usize {
        match self {
            Model::Proposed { encoder, .. } => encoder.config().patch_len,
            Model::Tcn(m) => m.config().patch_len,
            Model::PatchTst(m) => m.config().patch_len,
        }
    }

    /// Forecast horizon in patches.
    pub fn horizon(&self) -> usize {
        match self {
            Model::Proposed { forecaster, .. } => forecaster.config().horizon,
            Model::Tcn(m) => m.config().horizon,
            Model::PatchTst(m) => m.config().horizon,
        }
    }

    /// Hash of the model configuration.
    pub fn config_hash(&self) -> String {
        match self {
            Model::Proposed {
                encoder,
                forecaster,
            } => config_hash(&(encoder.config(), forecaster.config())),
            Model::Tcn(m) => config_hash(m.config()),
            Model::PatchTst(m) => config_hash(m.config()),
        }
    }

    /// Deterministic K-h forecasts for one sample (dropout off).
    pub fn predict(&self, sample: &SeriesSample) -> Result<Vec<f64>> {
        match self {
            Model::Proposed {
                encoder,
                forecaster,
            } => {
                let patches = patchify(&sample.x, encoder.config().patch_len)?;
                let tokens = encoder.encode_sequence_value(&patches)?;
                forecaster.forecast_value(&tokens.tokens)
            }
            Model::Tcn(m) => m.forecast_value(&sample.x),
            Model::PatchTst(m) => m.forecast_value(&sample.x),
        }
    }
}

/// Deterministic patch-level evaluation over a dataset.
pub fn evaluate(model: &Model, dataset: &[SeriesSample]) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::config(
            "evaluation needs a non-empty dataset".to_string(),
        ));
    }
    let patch_len = model.patch_len();
    let horizon = model.horizon();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = dataset
        .par_iter()
        .map(|sample| {
            let preds = model.predict(sample)?;
            let targets = aggregate_targets(&sample.y, patch_len)?;
            Ok((preds, targets.values[horizon..].to_vec()))
        })
        .collect::<Result<_>>()?;
    let (preds, targets): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let (mse, mae) = mse_mae(&preds, &targets)?;
    Ok(MetricsReport {
        model_name: model.name().to_string(),
        mse,
        mae,
        num_eval_pairs: preds.iter().map(Vec::len).sum(),
        config_hash: model.config_hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, SynthConfig};
    use rand::Rng;

    fn tiny_dataset(n: usize, t: usize, seed: u64) -> Vec<SeriesSample> {
        generate_dataset(&SynthConfig {
            num_samples: n,
            seq_len: t,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_encoder_cfg() -> EncoderConfig {
        EncoderConfig {
            patch_len: 4,
            in_features: 6,
            conv_channels: vec![4, 4],
            kernel_width: 3,
            num_dense_blocks: 2,
            token_dim: 8,
            refine_heads: 2,
            dropout_rate: 0.0,
        }
    }

    fn tiny_forecaster_cfg() -> ForecasterConfig {
        ForecasterConfig {
            d_model: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            dropout_rate: 0.0,
            max_patches: 16,
            horizon: 1,
            input_dim: 8,
        }
    }

    fn quick_train_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            stage1_epochs: 2,
            stage2_epochs: 2,
            baseline_epochs: 2,
            seed,
        }
    }

    #[test]
    fn metric_basics() {
        let (mse, mae) = mse_mae(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap();
        assert_eq!((mse, mae), (0.0, 0.0));

        let (mse, mae) = mse_mae(&[vec![2.0, 3.0]], &[vec![1.0, 2.0]]).unwrap();
        assert_eq!((mse, mae), (1.0, 1.0));

        let (mse, mae) = mse_mae(&[vec![0.0, 0.0]], &[vec![1.0, 3.0]]).unwrap();
        assert_eq!((mse, mae), (5.0, 2.0));
    }

    #[test]
    fn metric_errors() {
        assert!(mse_mae(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(mse_mae(&[vec![1.0, 2.0]], &[vec![1.0]]).is_err());
        assert!(mse_mae(&[], &[]).is_err());
    }

    #[test]
    fn metric_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let samples = rng.gen_range(1..5);
            let preds: Vec<Vec<f64>> = (0..samples)
                .map(|_| {
                    (0..rng.gen_range(1..7))
                        .map(|_| rng.gen_range(-10.0..10.0))
                        .collect()
                })
                .collect();
            let targets: Vec<Vec<f64>> = preds
                .iter()
                .map(|p| p.iter().map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect();

            let mut count = 0usize;
            let mut sq = 0.0;
            let mut abs = 0.0;
            for i in 0..preds.len() {
                for j in 0..preds[i].len() {
                    let d: f64 = preds[i][j] - targets[i][j];
                    sq += d * d;
                    abs += d.abs();
                    count += 1;
                }
            }
            let (mse, mae) = mse_mae(&preds, &targets).unwrap();
            assert!((mse - sq / count as f64).abs() < 1e-12);
            assert!((mae - abs / count as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn stage1_smoke_changes_parameters() {
        let data = tiny_dataset(4, 16, 1);
        let cfg = quick_train_cfg(0);
        let mut log = TrainLog::new();
        let encoder = train_stage1(&data, &tiny_encoder_cfg(), 1, &cfg, &mut log).unwrap();

        let mut untouched_rng = cfg.stream(1);
        let fresh = PatchEncoder::new(tiny_encoder_cfg(), &mut untouched_rng).unwrap();
        assert_ne!(
            encoder.params().content_hash(),
            fresh.params().content_hash()
        );
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|(_, l)| l.is_finite()));
    }

    #[test]
    fn stage1_fits_zero_variance_targets() {
        let synth = SynthConfig {
            num_samples: 4,
            seq_len: 16,
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            sigma_y: 0.0,
            seed: 5,
            ..SynthConfig::default()
        };
        let data = generate_dataset(&synth).unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            stage1_epochs: 150,
            ..quick_train_cfg(1)
        };
        let mut log = TrainLog::new();
        train_stage1(&data, &tiny_encoder_cfg(), 1, &cfg, &mut log).unwrap();
        let first = log.first().unwrap().1;
        let last = log.last().unwrap().1;
        assert!(
            last < first,
            "loss must shrink toward the constant target: {first} -> {last}"
        );
        assert!(
            last < 0.05,
            "degenerate regression should approach zero, got {last}"
        );
    }

    #[test]
    fn stage2_freezes_the_encoder() {
        let data = tiny_dataset(4, 16, 2);
        let cfg = quick_train_cfg(2);
        let mut log = TrainLog::new();
        let encoder = train_stage1(&data, &tiny_encoder_cfg(), 1, &cfg, &mut log).unwrap();

        let hash_before = encoder.params().content_hash();
        let mut log2 = TrainLog::new();
        let forecaster =
            train_stage2(&data, &encoder, &tiny_forecaster_cfg(), &cfg, &mut log2).unwrap();
        assert_eq!(
            encoder.params().content_hash(),
            hash_before,
            "stage 2 must not touch encoder parameters"
        );
        assert_eq!(log2.len(), 2);
        assert!(log2.iter().all(|(_, l)| l.is_finite()));

        let report = evaluate(&Model::proposed(encoder, forecaster).unwrap(), &data).unwrap();
        assert!(report.mse.is_finite() && report.mae.is_finite());
        // 16 steps, P=4, h=1: 3 pairs per sample.
        assert_eq!(report.num_eval_pairs, 4 * 3);
    }

    #[test]
    fn baseline_smoke_and_determinism() {
        let data = tiny_dataset(4, 12, 3);
        let cfg = quick_train_cfg(7);
        let tcn_cfg = BaselineConfig::Tcn(TcnConfig {
            levels: 2,
            channels: 4,
            kernel_width: 2,
            patch_len: 4,
            dropout_rate: 0.0,
            ..TcnConfig::default()
        });
        let pt_cfg = BaselineConfig::PatchTst(PatchTstConfig {
            patch_len: 4,
            d_model: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            dropout_rate: 0.0,
            max_patches: 8,
            ..PatchTstConfig::default()
        });

        let mut log = TrainLog::new();
        let a = train_baseline(&data, &tcn_cfg, &cfg, &mut log).unwrap();
        let mut log_b = TrainLog::new();
        let b = train_baseline(&data, &tcn_cfg, &cfg, &mut log_b).unwrap();
        match (&a, &b) {
            (BaselineModel::Tcn(x), BaselineModel::Tcn(y)) => {
                assert_eq!(x.params().content_hash(), y.params().content_hash());
            }
            _ => panic!("expected TCN models"),
        }
        assert_eq!(log, log_b);

        let mut log_pt = TrainLog::new();
        let pt = train_baseline(&data, &pt_cfg, &cfg, &mut log_pt).unwrap();
        assert!(log_pt.iter().all(|(_, l)| l.is_finite()));
        let model = match pt {
            BaselineModel::PatchTst(m) => Model::PatchTst(m),
            BaselineModel::Tcn(m) => Model::Tcn(m),
        };
        let report = evaluate(&model, &data).unwrap();
        assert_eq!(report.model_name, "patchtst");
        assert_eq!(report.num_eval_pairs, 4 * 2);
    }

    #[test]
    fn exact_predictions_score_zero() {
        // All alphas and noise off make y identically zero; a TCN zeroed all
        // the way through predicts exactly that, so both metrics vanish.
        let synth = SynthConfig {
            num_samples: 3,
            seq_len: 12,
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            sigma_y: 0.0,
            ..SynthConfig::default()
        };
        let data = generate_dataset(&synth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tcn = TcnModel::new(
            TcnConfig {
                levels: 1,
                channels: 3,
                kernel_width: 2,
                patch_len: 4,
                dropout_rate: 0.0,
                ..TcnConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let names: Vec<String> = tcn
            .params()
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.contains("kernels") || n.contains("weight"))
            .collect();
        for name in names {
            let slot = tcn.params().slot(&name).unwrap();
            let shape = tcn.params().tensor(slot).shape().to_vec();
            tcn.params_mut()
                .set_tensor(slot, Tensor::zeros(shape))
                .unwrap();
        }
        let report = evaluate(&Model::Tcn(tcn), &data).unwrap();
        assert_eq!((report.mse, report.mae), (0.0, 0.0));
    }

    #[test]
    fn constant_predictor_mse_is_second_moment() {
        // A TCN with zeroed kernels forecasts its head bias everywhere, so
        // its MSE equals the mean squared deviation of the targets from b.
        let data = tiny_dataset(3, 12, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tcn = TcnModel::new(
            TcnConfig {
                levels: 1,
                channels: 3,
                kernel_width: 2,
                patch_len: 4,
                dropout_rate: 0.0,
                ..TcnConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let b = 0.4;
        let names: Vec<String> = tcn
            .params()
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.contains("kernels") || n.contains("head.weight"))
            .collect();
        for name in names {
            let slot = tcn.params().slot(&name).unwrap();
            let shape = tcn.params().tensor(slot).shape().to_vec();
            tcn.params_mut()
                .set_tensor(slot, Tensor::zeros(shape))
                .unwrap();
        }
        let bias = tcn.params().slot("tcn.head.bias").unwrap();
        tcn.params_mut()
            .set_tensor(bias, Tensor::vector(&[b]))
            .unwrap();

        let model = Model::Tcn(tcn);
        let report = evaluate(&model, &data).unwrap();

        let mut sq = 0.0;
        let mut n = 0usize;
        for sample in &data {
            let targets = aggregate_targets(&sample.y, 4).unwrap();
            for v in &targets.values[1..] {
                sq += (v - b) * (v - b);
                n += 1;
            }
        }
        assert!((report.mse - sq / n as f64).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = tiny_dataset(3, 16, 11);
        let cfg = quick_train_cfg(4);
        let mut log = TrainLog::new();
        let encoder = train_stage1(&data, &tiny_encoder_cfg(), 1, &cfg, &mut log).unwrap();
        let forecaster =
            train_stage2(&data, &encoder, &tiny_forecaster_cfg(), &cfg, &mut log).unwrap();
        let model = Model::proposed(encoder, forecaster).unwrap();
        let a = evaluate(&model, &data).unwrap();
        let b = evaluate(&model, &data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pipeline_is_bit_reproducible() {
        let data = tiny_dataset(4, 16, 13);
        let run = || {
            let cfg = quick_train_cfg(21);
            let mut log = TrainLog::new();
            let encoder = train_stage1(&data, &tiny_encoder_cfg(), 1, &cfg, &mut log).unwrap();
            let forecaster =
                train_stage2(&data, &encoder, &tiny_forecaster_cfg(), &cfg, &mut log).unwrap();
            let model = Model::proposed(encoder, forecaster).unwrap();
            evaluate(&model, &data).unwrap()
        };
        assert_eq!(run(), run());
    }
}
