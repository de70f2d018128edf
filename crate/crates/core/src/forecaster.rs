//! Stage-2 forecaster: learned positional embeddings, a pre-normalization
//! Transformer encoder stack, and a shared linear head that predicts the
//! patch-level target `h` patches ahead of each hidden state.
//!
//! Attention is bidirectional over all tokens; leakage across the horizon
//! is prevented by the label alignment (the target of patch k+h), not by
//! masking.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    multi_head_attention_grouped, Binding, MhaSlots, ParamSet, ParamSlot, Tape, Tensor, ValueId,
};
use crate::patching::check_horizon;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Hyperparameters of the Transformer forecaster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    /// Model width.
    pub d_model: usize,
    /// Encoder layers.
    pub num_layers: usize,
    /// Attention heads per layer.
    pub num_heads: usize,
    /// Hidden width of the position-wise feed-forward network.
    pub ffn_dim: usize,
    /// Dropout applied to the position-enhanced sequence during training.
    pub dropout_rate: f64,
    /// Capacity of the positional embedding table.
    pub max_patches: usize,
    /// Forecast horizon in patches.
    pub horizon: usize,
    /// Dimension of incoming tokens; a projection is allocated only when it
    /// differs from `d_model`.
    pub input_dim: usize,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            d_model: 64,
            num_layers: 4,
            num_heads: 16,
            ffn_dim: 256,
            dropout_rate: 0.1,
            max_patches: 64,
            horizon: 1,
            input_dim: 64,
        }
    }
}

impl ForecasterConfig {
    /// Validate divisibility and range constraints.
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_layers == 0 || self.ffn_dim == 0 || self.input_dim == 0 {
            return Err(Error::config(
                "forecaster: all dimensions must be >= 1".to_string(),
            ));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "forecaster: d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.horizon == 0 || self.horizon >= self.max_patches {
            return Err(Error::config(format!(
                "forecaster: horizon {} must satisfy 1 <= horizon < max_patches {}",
                self.horizon, self.max_patches
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "forecaster: dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct LayerSlots {
    ln1_gamma: ParamSlot,
    ln1_beta: ParamSlot,
    attention: MhaSlots,
    ln2_gamma: ParamSlot,
    ln2_beta: ParamSlot,
    ffn_w1: ParamSlot,
    ffn_b1: ParamSlot,
    ffn_w2: ParamSlot,
    ffn_b2: ParamSlot,
}

/// Pre-norm Transformer encoder layers with a terminal layer norm. Shared
/// between the proposed forecaster and the patch-Transformer baseline.
#[derive(Clone)]
pub struct TransformerStack {
    num_heads: usize,
    layers: Vec<LayerSlots>,
    final_gamma: ParamSlot,
    final_beta: ParamSlot,
}

impl TransformerStack {
    /// Allocate `num_layers` layers of width `d_model` under `prefix`.
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        num_layers: usize,
        num_heads: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let p = format!("{prefix}.layer{l}");
            let ln1_gamma = params.add(format!("{p}.ln1.gamma"), Tensor::full(vec![d_model], 1.0));
            let ln1_beta = params.add(format!("{p}.ln1.beta"), Tensor::zeros(vec![d_model]));
            let attention = MhaSlots::init(params, &format!("{p}.attention"), d_model, rng);
            let ln2_gamma = params.add(format!("{p}.ln2.gamma"), Tensor::full(vec![d_model], 1.0));
            let ln2_beta = params.add(format!("{p}.ln2.beta"), Tensor::zeros(vec![d_model]));
            let ffn_w1 = params.add(
                format!("{p}.ffn.w1"),
                Tensor::xavier_uniform(rng, vec![d_model, ffn_dim], d_model, ffn_dim),
            );
            let ffn_b1 = params.add(format!("{p}.ffn.b1"), Tensor::zeros(vec![ffn_dim]));
            let ffn_w2 = params.add(
                format!("{p}.ffn.w2"),
                Tensor::xavier_uniform(rng, vec![ffn_dim, d_model], ffn_dim, d_model),
            );
            let ffn_b2 = params.add(format!("{p}.ffn.b2"), Tensor::zeros(vec![d_model]));
            layers.push(LayerSlots {
                ln1_gamma,
                ln1_beta,
                attention,
                ln2_gamma,
                ln2_beta,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
            });
        }
        let final_gamma = params.add(
            format!("{prefix}.final_ln.gamma"),
            Tensor::full(vec![d_model], 1.0),
        );
        let final_beta = params.add(
            format!("{prefix}.final_ln.beta"),
            Tensor::zeros(vec![d_model]),
        );
        TransformerStack {
            num_heads,
            layers,
            final_gamma,
            final_beta,
        }
    }

    /// Run the stack over `[K, d_model]` tokens:
    /// `u = x + MHA(LN(x)); x = u + FFN(LN(u))` per layer, then a final
    /// layer norm. Attention is full and unmasked.
    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: ValueId) -> Result<ValueId> {
        self.forward_grouped(tape, binding, x, 1)
    }

    /// Batched variant over `groups` stacked sequences: every op is
    /// row-local except attention, which never crosses group boundaries, so
    /// each group's rows match the single-sequence forward bit for bit.
    pub fn forward_grouped(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        mut x: ValueId,
        groups: usize,
    ) -> Result<ValueId> {
        for layer in &self.layers {
            let normed = tape.layer_norm(
                x,
                binding.id(layer.ln1_gamma),
                binding.id(layer.ln1_beta),
                LAYER_NORM_EPS,
            )?;
            let attended = multi_head_attention_grouped(
                tape,
                normed,
                &layer.attention.weights(binding),
                self.num_heads,
                groups,
            )?;
            let u = tape.add(x, attended)?;

            let normed = tape.layer_norm(
                u,
                binding.id(layer.ln2_gamma),
                binding.id(layer.ln2_beta),
                LAYER_NORM_EPS,
            )?;
            let hidden = tape.matmul(normed, binding.id(layer.ffn_w1))?;
            let hidden = tape.add_bias_row(hidden, binding.id(layer.ffn_b1))?;
            let hidden = tape.gelu(hidden);
            let ffn = tape.matmul(hidden, binding.id(layer.ffn_w2))?;
            let ffn = tape.add_bias_row(ffn, binding.id(layer.ffn_b2))?;
            x = tape.add(u, ffn)?;
        }
        tape.layer_norm(
            x,
            binding.id(self.final_gamma),
            binding.id(self.final_beta),
            LAYER_NORM_EPS,
        )
    }
}

/// The trainable Transformer forecaster.
#[derive(Clone)]
pub struct Forecaster {
    cfg: ForecasterConfig,
    params: ParamSet,
    projection: Option<(ParamSlot, ParamSlot)>,
    positional: ParamSlot,
    stack: TransformerStack,
    head_w: ParamSlot,
    head_b: ParamSlot,
}

impl Forecaster {
    /// Initialize parameters for the given configuration.
    pub fn new(cfg: ForecasterConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let projection = if cfg.input_dim == cfg.d_model {
            None
        } else {
            let w = params.add(
                "forecaster.project.weight",
                Tensor::xavier_uniform(
                    rng,
                    vec![cfg.input_dim, cfg.d_model],
                    cfg.input_dim,
                    cfg.d_model,
                ),
            );
            let b = params.add("forecaster.project.bias", Tensor::zeros(vec![cfg.d_model]));
            Some((w, b))
        };
        let positional = params.add(
            "forecaster.positional",
            Tensor::randn(rng, vec![cfg.max_patches, cfg.d_model], 0.02),
        );
        let stack = TransformerStack::init(
            &mut params,
            "forecaster.encoder",
            cfg.d_model,
            cfg.num_layers,
            cfg.num_heads,
            cfg.ffn_dim,
            rng,
        );
        let head_w = params.add(
            "forecaster.head.weight",
            Tensor::xavier_uniform(rng, vec![cfg.d_model, 1], cfg.d_model, 1),
        );
        let head_b = params.add("forecaster.head.bias", Tensor::zeros(vec![1]));
        Ok(Forecaster {
            cfg,
            params,
            projection,
            positional,
            stack,
            head_w,
            head_b,
        })
    }

    /// Configuration used to build this model.
    pub fn config(&self) -> &ForecasterConfig {
        &self.cfg
    }

    /// Parameter store.
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameter store.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Register parameters on a tape.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.params.bind(tape)
    }

    /// Map incoming `[K, input_dim]` tokens to model width. When the input
    /// dimension already equals `d_model` this is an exact passthrough: no
    /// parameters exist and the same tape value is returned.
    pub fn project_input(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        tokens: ValueId,
    ) -> Result<ValueId> {
        match self.projection {
            None => Ok(tokens),
            Some((w, b)) => {
                let projected = tape.matmul(tokens, binding.id(w))?;
                tape.add_bias_row(projected, binding.id(b))
            }
        }
    }

    /// Add the first K rows of the positional table to the tokens, then
    /// apply dropout when training.
    pub fn add_positional(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: ValueId,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let (k, _) = tape.value(x).dims2()?;
        if k > self.cfg.max_patches {
            return Err(Error::config(format!(
                "sequence has {k} patches but the positional table holds {}",
                self.cfg.max_patches
            )));
        }
        let table = binding.id(self.positional);
        let rows = tape.slice_rows(table, 0, k)?;
        let mut out = tape.add(x, rows)?;
        if let Some(rng) = dropout {
            out = tape.dropout(out, self.cfg.dropout_rate, rng)?;
        }
        Ok(out)
    }

    /// The encoder stack over position-enhanced tokens.
    pub fn encoder_forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: ValueId,
    ) -> Result<ValueId> {
        self.stack.forward(tape, binding, x)
    }

    /// Linear head with horizon alignment: forecast `i` (for the target of
    /// patch `i + h`) is `w . hidden[i] + b`, for `i` in `0..K-h`.
    pub fn predict_horizon(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        hidden: ValueId,
        horizon: usize,
    ) -> Result<ValueId> {
        let (k, _) = tape.value(hidden).dims2()?;
        check_horizon(k, horizon)?;
        let kept = tape.slice_rows(hidden, 0, k - horizon)?;
        let out = tape.matmul(kept, binding.id(self.head_w))?;
        tape.add_bias_row(out, binding.id(self.head_b))
    }

    /// Full forward pass from `[K, input_dim]` tokens to a `[K-h, 1]`
    /// forecast column.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        tokens: ValueId,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let projected = self.project_input(tape, binding, tokens)?;
        let enhanced = self.add_positional(tape, binding, projected, dropout)?;
        let hidden = self.encoder_forward(tape, binding, enhanced)?;
        self.predict_horizon(tape, binding, hidden, self.cfg.horizon)
    }

    /// Batched forward pass over `groups` stacked token sequences of
    /// `seq_len` rows each (one `[G*K, input_dim]` matrix). Output stacks
    /// each group's `K-h` forecasts in group order; per group it matches
    /// [`Forecaster::forward`] bit for bit when dropout is off.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        tokens: ValueId,
        seq_len: usize,
        groups: usize,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let (rows, _) = tape.value(tokens).dims2()?;
        if groups == 0 || rows != groups * seq_len {
            return Err(Error::shape(
                "forecaster_forward_batch",
                format!("{rows} rows do not form {groups} sequences of {seq_len}"),
            ));
        }
        if seq_len > self.cfg.max_patches {
            return Err(Error::config(format!(
                "sequence has {seq_len} patches but the positional table holds {}",
                self.cfg.max_patches
            )));
        }
        check_horizon(seq_len, self.cfg.horizon)?;

        let projected = self.project_input(tape, binding, tokens)?;
        let pos = tape.slice_rows(binding.id(self.positional), 0, seq_len)?;
        let tiled = tape.tile_rows(pos, groups)?;
        let mut enhanced = tape.add(projected, tiled)?;
        if let Some(rng) = dropout {
            enhanced = tape.dropout(enhanced, self.cfg.dropout_rate, rng)?;
        }
        let hidden = self
            .stack
            .forward_grouped(tape, binding, enhanced, groups)?;
        let scored = tape.matmul(hidden, binding.id(self.head_w))?;
        let scored = tape.add_bias_row(scored, binding.id(self.head_b))?;

        let keep = seq_len - self.cfg.horizon;
        let parts: Vec<ValueId> = (0..groups)
            .map(|g| tape.slice_rows(scored, g * seq_len, g * seq_len + keep))
            .collect::<Result<_>>()?;
        tape.concat_rows(&parts)
    }

    /// Evaluation-mode forecast on a private tape (deterministic, dropout
    /// off): K-h values, entry i predicting the target of patch i+h.
    pub fn forecast_value(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = self.params.bind_frozen(&mut tape);
        let input = tape.constant(tokens.clone());
        let out = self.forward(&mut tape, &binding, input, None)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Hidden states for the given tokens in evaluation mode.
    pub fn hidden_value(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.params.bind_frozen(&mut tape);
        let input = tape.constant(tokens.clone());
        let projected = self.project_input(&mut tape, &binding, input)?;
        let enhanced = self.add_positional(&mut tape, &binding, projected, None)?;
        let hidden = self.encoder_forward(&mut tape, &binding, enhanced)?;
        Ok(tape.value(hidden).clone())
    }
}
