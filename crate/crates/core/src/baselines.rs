//! Reference models trained under the same protocol as the proposed
//! pipeline: a causal dilated temporal convolutional network operating on
//! the raw sequence, and a patch-Transformer that embeds flattened patches
//! end-to-end.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::TransformerStack;
use crate::numerics::{Binding, ParamSet, ParamSlot, Tape, Tensor, ValueId};
use crate::patching::{check_horizon, patchify};

/// Temporal convolutional network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    /// Residual levels; level `l` dilates by `dilation_base^l`.
    pub levels: usize,
    /// Channels per level.
    pub channels: usize,
    /// Kernel width of each causal convolution.
    pub kernel_width: usize,
    /// Base of the per-level dilation schedule.
    pub dilation_base: usize,
    /// Dropout rate during training.
    pub dropout_rate: f64,
    /// Forecast horizon in patches.
    pub horizon: usize,
    /// Patch length used to pool step states onto the patch grid.
    pub patch_len: usize,
    /// Input features of the raw sequence.
    pub in_features: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            levels: 4,
            channels: 32,
            kernel_width: 3,
            dilation_base: 2,
            dropout_rate: 0.1,
            horizon: 1,
            patch_len: 8,
            in_features: 6,
        }
    }
}

impl TcnConfig {
    /// Validate counts and rates.
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels == 0 || self.kernel_width == 0 {
            return Err(Error::config(
                "tcn: levels, channels, kernel_width must be >= 1".to_string(),
            ));
        }
        if self.dilation_base == 0 {
            return Err(Error::config("tcn: dilation_base must be >= 1".to_string()));
        }
        if self.patch_len == 0 || self.in_features == 0 {
            return Err(Error::config(
                "tcn: patch_len and in_features must be >= 1".to_string(),
            ));
        }
        if self.horizon == 0 {
            return Err(Error::config("tcn: horizon must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "tcn: dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Receptive field of the stack: two dilated convolutions per level,
    /// `1 + sum_l 2*(kernel_width-1)*dilation_base^l`.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.levels)
            .map(|l| 2 * (self.kernel_width - 1) * self.dilation_base.pow(l as u32))
            .sum::<usize>()
    }
}

#[derive(Clone)]
struct TcnLevel {
    conv1_k: ParamSlot,
    conv1_b: ParamSlot,
    conv2_k: ParamSlot,
    conv2_b: ParamSlot,
    /// 1x1 projection when the residual path changes channel count.
    residual: Option<(ParamSlot, ParamSlot)>,
}

/// Causal dilated residual convolution stack with a patch-pooled linear head.
#[derive(Clone)]
pub struct TcnModel {
    cfg: TcnConfig,
    params: ParamSet,
    levels: Vec<TcnLevel>,
    head_w: ParamSlot,
    head_b: ParamSlot,
}

impl TcnModel {
    /// Initialize parameters.
    pub fn new(cfg: TcnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut levels = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let in_ch = if l == 0 {
                cfg.in_features
            } else {
                cfg.channels
            };
            let conv1_k = params.add(
                format!("tcn.level{l}.conv1.kernels"),
                Tensor::xavier_uniform(
                    rng,
                    vec![cfg.channels, in_ch, cfg.kernel_width],
                    in_ch * cfg.kernel_width,
                    cfg.channels * cfg.kernel_width,
                ),
            );
            let conv1_b = params.add(
                format!("tcn.level{l}.conv1.bias"),
                Tensor::zeros(vec![cfg.channels]),
            );
            let conv2_k = params.add(
                format!("tcn.level{l}.conv2.kernels"),
                Tensor::xavier_uniform(
                    rng,
                    vec![cfg.channels, cfg.channels, cfg.kernel_width],
                    cfg.channels * cfg.kernel_width,
                    cfg.channels * cfg.kernel_width,
                ),
            );
            let conv2_b = params.add(
                format!("tcn.level{l}.conv2.bias"),
                Tensor::zeros(vec![cfg.channels]),
            );
            let residual = if in_ch != cfg.channels {
                let k = params.add(
                    format!("tcn.level{l}.residual.kernels"),
                    Tensor::xavier_uniform(rng, vec![cfg.channels, in_ch, 1], in_ch, cfg.channels),
                );
                let b = params.add(
                    format!("tcn.level{l}.residual.bias"),
                    Tensor::zeros(vec![cfg.channels]),
                );
                Some((k, b))
            } else {
                None
            };
            levels.push(TcnLevel {
                conv1_k,
                conv1_b,
                conv2_k,
                conv2_b,
                residual,
            });
        }
        let head_w = params.add(
            "tcn.head.weight",
            Tensor::xavier_uniform(rng, vec![cfg.channels, 1], cfg.channels, 1),
        );
        let head_b = params.add("tcn.head.bias", Tensor::zeros(vec![1]));
        Ok(TcnModel {
            cfg,
            params,
            levels,
            head_w,
            head_b,
        })
    }

    /// Configuration used to build this model.
    pub fn config(&self) -> &TcnConfig {
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

    /// Step-level states `[T, C]`: the residual conv stack with strictly
    /// causal (left-only) padding, so state t never sees inputs after t.
    pub fn step_states(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: ValueId,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let (_, f) = tape.value(x).dims2()?;
        if f != self.cfg.in_features {
            return Err(Error::shape(
                "tcn_forward",
                format!(
                    "input has {f} features, model expects {}",
                    self.cfg.in_features
                ),
            ));
        }
        let mut current = tape.transpose2d(x)?; // [F, T]
        for (l, level) in self.levels.iter().enumerate() {
            let dilation = self.cfg.dilation_base.pow(l as u32);
            let pad = (self.cfg.kernel_width - 1) * dilation;
            let mut path = tape.conv1d_dilated(
                current,
                binding.id(level.conv1_k),
                binding.id(level.conv1_b),
                pad,
                0,
                dilation,
            )?;
            path = tape.gelu(path);
            if let Some(rng) = dropout.as_deref_mut() {
                path = tape.dropout(path, self.cfg.dropout_rate, rng)?;
            }
            path = tape.conv1d_dilated(
                path,
                binding.id(level.conv2_k),
                binding.id(level.conv2_b),
                pad,
                0,
                dilation,
            )?;
            path = tape.gelu(path);
            if let Some(rng) = dropout.as_deref_mut() {
                path = tape.dropout(path, self.cfg.dropout_rate, rng)?;
            }
            let shortcut = match level.residual {
                Some((k, b)) => tape.conv1d(current, binding.id(k), binding.id(b), 0)?,
                None => current,
            };
            current = tape.add(path, shortcut)?;
        }
        tape.transpose2d(current) // [T, C]
    }

    /// Full forward pass: step states, mean pooling onto the patch grid,
    /// and the shared affine head with horizon alignment.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: ValueId,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let (t, _) = tape.value(x).dims2()?;
        let p = self.cfg.patch_len;
        if t < p {
            return Err(Error::config(format!(
                "sequence length {t} is shorter than patch length {p}"
            )));
        }
        let k = t / p;
        check_horizon(k, self.cfg.horizon)?;

        let states = self.step_states(tape, binding, x, dropout)?;
        let pooled = pool_patch_means(tape, states, t, k, p)?;
        let out = tape.matmul(pooled, binding.id(self.head_w))?;
        let out = tape.add_bias_row(out, binding.id(self.head_b))?;
        tape.slice_rows(out, 0, k - self.cfg.horizon)
    }

    /// Batched forward over sequences stacked channels-first (see
    /// [`stack_channels_first`]): one grouped conv stack instead of one tape
    /// per sample. Per group it matches [`TcnModel::forward`] bit for bit
    /// when dropout is off.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        stacked: ValueId,
        seq_len: usize,
        groups: usize,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let (rows, t) = tape.value(stacked).dims2()?;
        if groups == 0 || rows != groups * self.cfg.in_features || t != seq_len {
            return Err(Error::shape(
                "tcn_forward_batch",
                format!(
                    "stacked input is {rows}x{t}, expected {} features x {groups} groups by {seq_len} steps",
                    self.cfg.in_features
                ),
            ));
        }
        let p = self.cfg.patch_len;
        if t < p {
            return Err(Error::config(format!(
                "sequence length {t} is shorter than patch length {p}"
            )));
        }
        let k = t / p;
        check_horizon(k, self.cfg.horizon)?;

        let mut current = stacked;
        for (l, level) in self.levels.iter().enumerate() {
            let dilation = self.cfg.dilation_base.pow(l as u32);
            let pad = (self.cfg.kernel_width - 1) * dilation;
            let mut path = tape.conv1d_grouped(
                current,
                binding.id(level.conv1_k),
                binding.id(level.conv1_b),
                pad,
                0,
                dilation,
                groups,
            )?;
            path = tape.gelu(path);
            if let Some(rng) = dropout.as_deref_mut() {
                path = tape.dropout(path, self.cfg.dropout_rate, rng)?;
            }
            path = tape.conv1d_grouped(
                path,
                binding.id(level.conv2_k),
                binding.id(level.conv2_b),
                pad,
                0,
                dilation,
                groups,
            )?;
            path = tape.gelu(path);
            if let Some(rng) = dropout.as_deref_mut() {
                path = tape.dropout(path, self.cfg.dropout_rate, rng)?;
            }
            let shortcut = match level.residual {
                Some((kern, b)) => {
                    tape.conv1d_grouped(current, binding.id(kern), binding.id(b), 0, 0, 1, groups)?
                }
                None => current,
            };
            current = tape.add(path, shortcut)?;
        }

        // [G*C, T] -> [T, G*C] -> patch means [K, G*C], then the shared head
        // per group with horizon alignment.
        let states = tape.transpose2d(current)?;
        let pooled = pool_patch_means(tape, states, t, k, p)?;
        let c = self.cfg.channels;
        let keep = k - self.cfg.horizon;
        let mut parts = Vec::with_capacity(groups);
        for g in 0..groups {
            let block = tape.slice_cols(pooled, g * c, (g + 1) * c)?;
            let out = tape.matmul(block, binding.id(self.head_w))?;
            let out = tape.add_bias_row(out, binding.id(self.head_b))?;
            parts.push(tape.slice_rows(out, 0, keep)?);
        }
        tape.concat_rows(&parts)
    }

    /// Evaluation-mode forecasts for one `[T, F]` sequence.
    pub fn forecast_value(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = self.params.bind_frozen(&mut tape);
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, &binding, input, None)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Mean-pool `[T, C]` step states into `[K, C]` patch states via a constant
/// `[K, T]` averaging matrix.
fn pool_patch_means(
    tape: &mut Tape,
    states: ValueId,
    t: usize,
    k: usize,
    p: usize,
) -> Result<ValueId> {
    let mut pool = vec![0.0; k * t];
    for i in 0..k {
        for j in 0..p {
            pool[i * t + i * p + j] = 1.0 / p as f64;
        }
    }
    let pool = tape.constant(Tensor::new(vec![k, t], pool)?);
    tape.matmul(pool, states)
}

/// Stack `[T, F]` sequences channels-first into one `[G*F, T]` matrix for
/// [`TcnModel::forward_batch`].
pub fn stack_channels_first(xs: &[&Tensor]) -> Result<Tensor> {
    let (t, f) = xs
        .first()
        .ok_or_else(|| Error::config("cannot stack an empty batch".to_string()))?
        .dims2()?;
    let mut data = Vec::with_capacity(xs.len() * f * t);
    for x in xs {
        if x.dims2()? != (t, f) {
            return Err(Error::shape(
                "stack_channels_first",
                format!(
                    "expected every sequence to be {t}x{f}, found {:?}",
                    x.shape()
                ),
            ));
        }
        for col in 0..f {
            for row in 0..t {
                data.push(x.row(row)[col]);
            }
        }
    }
    Tensor::new(vec![xs.len() * f, t], data)
}

/// Patch-Transformer baseline hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchTstConfig {
    /// Patch length (same grid as the proposed model).
    pub patch_len: usize,
    /// Model width.
    pub d_model: usize,
    /// Encoder layers.
    pub layers: usize,
    /// Attention heads.
    pub heads: usize,
    /// Feed-forward hidden width.
    pub ffn_dim: usize,
    /// Dropout rate during training.
    pub dropout_rate: f64,
    /// Forecast horizon in patches.
    pub horizon: usize,
    /// Input features of the raw sequence.
    pub in_features: usize,
    /// Capacity of the positional table.
    pub max_patches: usize,
}

impl Default for PatchTstConfig {
    fn default() -> Self {
        PatchTstConfig {
            patch_len: 8,
            d_model: 64,
            layers: 4,
            heads: 16,
            ffn_dim: 256,
            dropout_rate: 0.1,
            horizon: 1,
            in_features: 6,
            max_patches: 64,
        }
    }
}

impl PatchTstConfig {
    /// Validate divisibility and range constraints.
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0
            || self.d_model == 0
            || self.layers == 0
            || self.ffn_dim == 0
            || self.in_features == 0
        {
            return Err(Error::config(
                "patchtst: all dimensions must be >= 1".to_string(),
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "patchtst: d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.horizon == 0 || self.horizon >= self.max_patches {
            return Err(Error::config(format!(
                "patchtst: horizon {} must satisfy 1 <= horizon < max_patches {}",
                self.horizon, self.max_patches
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "patchtst: dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Patch-Transformer baseline: flattened patches linearly embedded
/// end-to-end, learned positions, and the same pre-norm encoder stack and
/// horizon-aligned head as the proposed forecaster.
#[derive(Clone)]
pub struct PatchTstModel {
    cfg: PatchTstConfig,
    params: ParamSet,
    embed_w: ParamSlot,
    embed_b: ParamSlot,
    positional: ParamSlot,
    stack: TransformerStack,
    head_w: ParamSlot,
    head_b: ParamSlot,
}

impl PatchTstModel {
    /// Initialize parameters.
    pub fn new(cfg: PatchTstConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let flat = cfg.patch_len * cfg.in_features;
        let embed_w = params.add(
            "patchtst.embed.weight",
            Tensor::xavier_uniform(rng, vec![flat, cfg.d_model], flat, cfg.d_model),
        );
        let embed_b = params.add("patchtst.embed.bias", Tensor::zeros(vec![cfg.d_model]));
        let positional = params.add(
            "patchtst.positional",
            Tensor::randn(rng, vec![cfg.max_patches, cfg.d_model], 0.02),
        );
        let stack = TransformerStack::init(
            &mut params,
            "patchtst.encoder",
            cfg.d_model,
            cfg.layers,
            cfg.heads,
            cfg.ffn_dim,
            rng,
        );
        let head_w = params.add(
            "patchtst.head.weight",
            Tensor::xavier_uniform(rng, vec![cfg.d_model, 1], cfg.d_model, 1),
        );
        let head_b = params.add("patchtst.head.bias", Tensor::zeros(vec![1]));
        Ok(PatchTstModel {
            cfg,
            params,
            embed_w,
            embed_b,
            positional,
            stack,
            head_w,
            head_b,
        })
    }

    /// Configuration used to build this model.
    pub fn config(&self) -> &PatchTstConfig {
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

    /// Full forward pass from a raw `[T, F]` sequence to `[K-h, 1]`
    /// forecasts: flatten patches, embed, add positions, encode, project.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: &Tensor,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let patches = patchify(x, self.cfg.patch_len)?;
        let k = patches.num_patches();
        check_horizon(k, self.cfg.horizon)?;
        if k > self.cfg.max_patches {
            return Err(Error::config(format!(
                "sequence has {k} patches but the positional table holds {}",
                self.cfg.max_patches
            )));
        }
        if patches.num_features() != self.cfg.in_features {
            return Err(Error::shape(
                "patchtst_forward",
                format!(
                    "input has {} features, model expects {}",
                    patches.num_features(),
                    self.cfg.in_features
                ),
            ));
        }

        // [K, P*F]: each patch flattened row-major.
        let flat = self.cfg.patch_len * self.cfg.in_features;
        let flattened = tape.constant(Tensor::new(
            vec![k, flat],
            patches.tensor().data().to_vec(),
        )?);
        let embedded = tape.matmul(flattened, binding.id(self.embed_w))?;
        let embedded = tape.add_bias_row(embedded, binding.id(self.embed_b))?;

        let table = binding.id(self.positional);
        let rows = tape.slice_rows(table, 0, k)?;
        let mut tokens = tape.add(embedded, rows)?;
        if let Some(rng) = dropout {
            tokens = tape.dropout(tokens, self.cfg.dropout_rate, rng)?;
        }

        let hidden = self.stack.forward(tape, binding, tokens)?;
        let kept = tape.slice_rows(hidden, 0, k - self.cfg.horizon)?;
        let out = tape.matmul(kept, binding.id(self.head_w))?;
        tape.add_bias_row(out, binding.id(self.head_b))
    }

    /// Batched forward over several raw sequences on one tape. Per group it
    /// matches [`PatchTstModel::forward`] bit for bit when dropout is off.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        xs: &[&Tensor],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let groups = xs.len();
        if groups == 0 {
            return Err(Error::config("cannot run an empty batch".to_string()));
        }
        let flat = self.cfg.patch_len * self.cfg.in_features;
        let mut k = 0;
        let mut stacked = Vec::new();
        for (i, x) in xs.iter().enumerate() {
            let patches = patchify(x, self.cfg.patch_len)?;
            if i == 0 {
                k = patches.num_patches();
                check_horizon(k, self.cfg.horizon)?;
                if k > self.cfg.max_patches {
                    return Err(Error::config(format!(
                        "sequence has {k} patches but the positional table holds {}",
                        self.cfg.max_patches
                    )));
                }
            } else if patches.num_patches() != k {
                return Err(Error::shape(
                    "patchtst_forward_batch",
                    format!(
                        "sample 0 has {k} patches but sample {i} has {}",
                        patches.num_patches()
                    ),
                ));
            }
            if patches.num_features() != self.cfg.in_features {
                return Err(Error::shape(
                    "patchtst_forward_batch",
                    format!(
                        "input has {} features, model expects {}",
                        patches.num_features(),
                        self.cfg.in_features
                    ),
                ));
            }
            stacked.extend_from_slice(patches.tensor().data());
        }

        let flattened = tape.constant(Tensor::new(vec![groups * k, flat], stacked)?);
        let embedded = tape.matmul(flattened, binding.id(self.embed_w))?;
        let embedded = tape.add_bias_row(embedded, binding.id(self.embed_b))?;
        let pos = tape.slice_rows(binding.id(self.positional), 0, k)?;
        let tiled = tape.tile_rows(pos, groups)?;
        let mut tokens = tape.add(embedded, tiled)?;
        if let Some(rng) = dropout {
            tokens = tape.dropout(tokens, self.cfg.dropout_rate, rng)?;
        }

        let hidden = self.stack.forward_grouped(tape, binding, tokens, groups)?;
        let scored = tape.matmul(hidden, binding.id(self.head_w))?;
        let scored = tape.add_bias_row(scored, binding.id(self.head_b))?;
        let keep = k - self.cfg.horizon;
        let parts: Vec<ValueId> = (0..groups)
            .map(|g| tape.slice_rows(scored, g * k, g * k + keep))
            .collect::<Result<_>>()?;
        tape.concat_rows(&parts)
    }

    /// Evaluation-mode forecasts for one `[T, F]` sequence.
    pub fn forecast_value(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &binding, x, None)?;
        Ok(tape.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};

    fn rng_for(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    fn tiny_tcn() -> TcnConfig {
        TcnConfig {
            levels: 2,
            channels: 3,
            kernel_width: 2,
            dilation_base: 2,
            dropout_rate: 0.0,
            horizon: 1,
            patch_len: 3,
            in_features: 2,
        }
    }

    fn tiny_patchtst() -> PatchTstConfig {
        PatchTstConfig {
            patch_len: 3,
            d_model: 6,
            layers: 1,
            heads: 2,
            ffn_dim: 12,
            dropout_rate: 0.0,
            horizon: 1,
            in_features: 2,
            max_patches: 8,
        }
    }

    #[test]
    fn receptive_field_formula() {
        let cfg = TcnConfig::default();
        // 1 + sum over 4 levels of 2*(3-1)*2^l = 1 + 4*(1+2+4+8).
        assert_eq!(cfg.receptive_field(), 1 + 4 * 15);
    }

    #[test]
    fn zeroed_tcn_outputs_head_bias() {
        let mut model = TcnModel::new(tiny_tcn(), &mut rng_for(0)).unwrap();
        let names: Vec<String> = model
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.contains("kernels"))
            .collect();
        for name in names {
            let slot = model.params.slot(&name).unwrap();
            let shape = model.params.tensor(slot).shape().to_vec();
            model.params.set_tensor(slot, Tensor::zeros(shape)).unwrap();
        }
        model
            .params
            .set_tensor(model.head_b, Tensor::vector(&[1.25]))
            .unwrap();

        let x = rand_matrix(&mut rng_for(1), 9, 2);
        let out = model.forecast_value(&x).unwrap();
        assert_eq!(out, vec![1.25, 1.25]);
    }

    #[test]
    fn tcn_produces_patch_aligned_forecast_counts() {
        let cfg = TcnConfig::default();
        let model = TcnModel::new(cfg, &mut rng_for(2)).unwrap();
        let x = rand_matrix(&mut rng_for(3), 160, 6);
        let out = model.forecast_value(&x).unwrap();
        assert_eq!(out.len(), 19);
    }

    #[test]
    fn degenerate_tcn_matches_per_step_affine_oracle() {
        // One level, kernel width 1: every state is an affine+ramp function
        // of its own time step only.
        let cfg = TcnConfig {
            levels: 1,
            channels: 2,
            kernel_width: 1,
            dilation_base: 1,
            dropout_rate: 0.0,
            horizon: 1,
            patch_len: 2,
            in_features: 2,
        };
        let model = TcnModel::new(cfg.clone(), &mut rng_for(4)).unwrap();
        let x = rand_matrix(&mut rng_for(5), 6, 2);

        let gelu = |v: f64| {
            0.5 * v * (1.0 + (0.797_884_560_802_865_4 * (v + 0.044_715 * v * v * v)).tanh())
        };
        let k1 = model.params.get("tcn.level0.conv1.kernels").unwrap();
        let k2 = model.params.get("tcn.level0.conv2.kernels").unwrap();
        let hw = model.params.tensor(model.head_w);
        let hb = model.params.tensor(model.head_b).data()[0];
        // No residual projection: in_features == channels.
        assert!(model.params.get("tcn.level0.residual.kernels").is_none());

        let step_state = |xt: &[f64]| -> Vec<f64> {
            let z1: Vec<f64> = (0..2)
                .map(|c| gelu((0..2).map(|i| k1.data()[c * 2 + i] * xt[i]).sum::<f64>()))
                .collect();
            let z2: Vec<f64> = (0..2)
                .map(|c| gelu((0..2).map(|i| k2.data()[c * 2 + i] * z1[i]).sum::<f64>()))
                .collect();
            (0..2).map(|c| z2[c] + xt[c]).collect()
        };
        let states: Vec<Vec<f64>> = (0..6).map(|t| step_state(x.row(t))).collect();
        let pooled: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                (0..2)
                    .map(|c| (states[2 * k][c] + states[2 * k + 1][c]) / 2.0)
                    .collect()
            })
            .collect();
        let expected: Vec<f64> = pooled[..2]
            .iter()
            .map(|s| hb + s.iter().zip(hw.data()).map(|(a, b)| a * b).sum::<f64>())
            .collect();

        let got = model.forecast_value(&x).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn tcn_is_causal() {
        let model = TcnModel::new(tiny_tcn(), &mut rng_for(6)).unwrap();
        let x = rand_matrix(&mut rng_for(7), 12, 2);
        let cut = 5; // compare states at times 0..=5

        let states_for = |input: &Tensor| {
            let mut tape = Tape::new();
            let binding = model.params.bind_frozen(&mut tape);
            let x_id = tape.constant(input.clone());
            let s = model.step_states(&mut tape, &binding, x_id, None).unwrap();
            tape.value(s).clone()
        };
        let base = states_for(&x);

        let mut corrupted = x.clone();
        for t in cut + 1..12 {
            for f in 0..2 {
                corrupted.data_mut()[t * 2 + f] = 99.0 + t as f64;
            }
        }
        let after = states_for(&corrupted);
        for t in 0..=cut {
            assert_eq!(base.row(t), after.row(t), "state at t={t} saw the future");
        }
    }

    #[test]
    fn tcn_passes_gradient_check() {
        let model = TcnModel::new(tiny_tcn(), &mut rng_for(8)).unwrap();
        let x = rand_matrix(&mut rng_for(9), 9, 2);
        let labels = Tensor::new(vec![2, 1], vec![0.5, -0.2]).unwrap();

        let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
        let err = grad_check(
            |tape, ids| {
                let binding = Binding::from_ids(ids.to_vec());
                let x_id = tape.constant(x.clone());
                let preds = model.forward(tape, &binding, x_id, None)?;
                let y = tape.constant(labels.clone());
                let diff = tape.sub(preds, y)?;
                let sq = tape.mul(diff, diff)?;
                tape.mean_all(sq)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "tcn gradient error {err}");
    }

    #[test]
    fn zeroed_patchtst_embedding_gives_constant_forecasts() {
        let mut model = PatchTstModel::new(tiny_patchtst(), &mut rng_for(10)).unwrap();
        let flat = 3 * 2;
        model
            .params
            .set_tensor(model.embed_w, Tensor::zeros(vec![flat, 6]))
            .unwrap();
        let pos_shape = model.params.tensor(model.positional).shape().to_vec();
        model
            .params
            .set_tensor(model.positional, Tensor::zeros(pos_shape))
            .unwrap();

        let x = rand_matrix(&mut rng_for(11), 12, 2);
        let out = model.forecast_value(&x).unwrap();
        assert!(out.len() == 3 && out.iter().all(|v| (v - out[0]).abs() < 1e-12));
    }

    #[test]
    fn patchtst_produces_patch_aligned_forecast_counts() {
        let cfg = PatchTstConfig::default();
        let model = PatchTstModel::new(cfg, &mut rng_for(12)).unwrap();
        let x = rand_matrix(&mut rng_for(13), 160, 6);
        let out = model.forecast_value(&x).unwrap();
        assert_eq!(out.len(), 19);
    }

    #[test]
    fn patchtst_matches_embed_plus_stack_composition() {
        let model = PatchTstModel::new(tiny_patchtst(), &mut rng_for(14)).unwrap();
        let x = rand_matrix(&mut rng_for(15), 9, 2);

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let combined = model.forward(&mut tape, &binding, &x, None).unwrap();

        // The same pipeline assembled from the parts.
        let patches = patchify(&x, 3).unwrap();
        let flattened =
            tape.constant(Tensor::new(vec![3, 6], patches.tensor().data().to_vec()).unwrap());
        let emb = tape.matmul(flattened, binding.id(model.embed_w)).unwrap();
        let emb = tape.add_bias_row(emb, binding.id(model.embed_b)).unwrap();
        let rows = tape.slice_rows(binding.id(model.positional), 0, 3).unwrap();
        let tokens = tape.add(emb, rows).unwrap();
        let hidden = model.stack.forward(&mut tape, &binding, tokens).unwrap();
        let kept = tape.slice_rows(hidden, 0, 2).unwrap();
        let out = tape.matmul(kept, binding.id(model.head_w)).unwrap();
        let expected = tape.add_bias_row(out, binding.id(model.head_b)).unwrap();

        assert_eq!(tape.value(combined).data(), tape.value(expected).data());
    }

    #[test]
    fn patchtst_passes_gradient_check() {
        let model = PatchTstModel::new(tiny_patchtst(), &mut rng_for(16)).unwrap();
        let x = rand_matrix(&mut rng_for(17), 9, 2);
        let labels = Tensor::new(vec![2, 1], vec![0.1, 0.9]).unwrap();

        let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
        let err = grad_check(
            |tape, ids| {
                let binding = Binding::from_ids(ids.to_vec());
                let preds = model.forward(tape, &binding, &x, None)?;
                let y = tape.constant(labels.clone());
                let diff = tape.sub(preds, y)?;
                let sq = tape.mul(diff, diff)?;
                tape.mean_all(sq)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "patchtst gradient error {err}");
    }

    #[test]
    fn batched_forwards_match_stacked_single_forwards() {
        let mut rng = rng_for(30);
        let a = rand_matrix(&mut rng, 9, 2);
        let b = rand_matrix(&mut rng, 9, 2);

        let tcn = TcnModel::new(tiny_tcn(), &mut rng_for(31)).unwrap();
        let mut expected = tcn.forecast_value(&a).unwrap();
        expected.extend(tcn.forecast_value(&b).unwrap());
        let mut tape = Tape::new();
        let binding = tcn.bind(&mut tape);
        let stacked = tape.constant(stack_channels_first(&[&a, &b]).unwrap());
        let got = tcn
            .forward_batch(&mut tape, &binding, stacked, 9, 2, None)
            .unwrap();
        assert_eq!(tape.value(got).data(), &expected[..]);

        let pt = PatchTstModel::new(tiny_patchtst(), &mut rng_for(32)).unwrap();
        let mut expected = pt.forecast_value(&a).unwrap();
        expected.extend(pt.forecast_value(&b).unwrap());
        let mut tape = Tape::new();
        let binding = pt.bind(&mut tape);
        let got = pt
            .forward_batch(&mut tape, &binding, &[&a, &b], None)
            .unwrap();
        assert_eq!(tape.value(got).data(), &expected[..]);
    }

    #[test]
    fn both_baselines_match_proposed_output_shape() {
        let t = 160;
        let p = 8;
        let h = 1;
        let expected = t / p - h;
        let tcn = TcnModel::new(TcnConfig::default(), &mut rng_for(18)).unwrap();
        let pt = PatchTstModel::new(PatchTstConfig::default(), &mut rng_for(19)).unwrap();
        let x = rand_matrix(&mut rng_for(20), t, 6);
        assert_eq!(tcn.forecast_value(&x).unwrap().len(), expected);
        assert_eq!(pt.forecast_value(&x).unwrap().len(), expected);
    }
}
