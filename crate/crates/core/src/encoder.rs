//! Stage-1 patch encoder: a shared dense-connected 1-D CNN per patch,
//! attention-weighted temporal pooling, projection to token space, and one
//! residual self-attention layer that refines the token sequence.
//!
//! The same parameters process every patch, so the per-patch part of the
//! pipeline is order-equivariant; only the refinement attention mixes
//! information across patches.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    multi_head_attention_grouped, Binding, MhaSlots, ParamSet, ParamSlot, Tape, Tensor, ValueId,
};
use crate::patching::PatchSequence;

/// Hyperparameters of the patch encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Patch length P.
    pub patch_len: usize,
    /// Input features F.
    pub in_features: usize,
    /// Output channels of each dense block.
    pub conv_channels: Vec<usize>,
    /// Temporal kernel width (odd, so same-padding preserves P).
    pub kernel_width: usize,
    /// Number of dense blocks; must match `conv_channels.len()`.
    pub num_dense_blocks: usize,
    /// Token embedding dimension D.
    pub token_dim: usize,
    /// Heads of the token refinement attention.
    pub refine_heads: usize,
    /// Dropout rate used during training.
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_len: 8,
            in_features: 6,
            conv_channels: vec![32, 32],
            kernel_width: 3,
            num_dense_blocks: 2,
            token_dim: 64,
            refine_heads: 4,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    /// Validate dimensional consistency.
    pub fn validate(&self) -> Result<()> {
        if self.num_dense_blocks == 0 || self.conv_channels.len() != self.num_dense_blocks {
            return Err(Error::config(format!(
                "encoder: conv_channels lists {} blocks but num_dense_blocks is {}",
                self.conv_channels.len(),
                self.num_dense_blocks
            )));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::config(
                "encoder: every dense block needs at least one channel".to_string(),
            ));
        }
        if self.kernel_width == 0 || self.kernel_width.is_multiple_of(2) {
            return Err(Error::config(format!(
                "encoder: kernel_width must be odd for same-padding, got {}",
                self.kernel_width
            )));
        }
        if self.kernel_width > self.patch_len {
            return Err(Error::config(format!(
                "encoder: kernel_width {} exceeds patch length {}",
                self.kernel_width, self.patch_len
            )));
        }
        if self.patch_len == 0 || self.in_features == 0 || self.token_dim == 0 {
            return Err(Error::config(
                "encoder: patch_len, in_features, token_dim must be >= 1".to_string(),
            ));
        }
        if self.refine_heads == 0 || !self.token_dim.is_multiple_of(self.refine_heads) {
            return Err(Error::config(format!(
                "encoder: token_dim {} must be divisible by refine_heads {}",
                self.token_dim, self.refine_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "encoder: dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Channels feeding block `b`: the patch plus every earlier block output.
    fn block_in_channels(&self, block: usize) -> usize {
        self.in_features + self.conv_channels[..block].iter().sum::<usize>()
    }

    /// Channels of the final feature map.
    pub fn feature_channels(&self) -> usize {
        *self
            .conv_channels
            .last()
            .expect("validated: at least one block")
    }
}

/// Token embeddings for one sequence, shape `[K, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// The `[K, D]` embedding matrix.
    pub tokens: Tensor,
}

impl TokenSequence {
    /// Wrap a `[K, D]` tensor, rejecting non-finite entries.
    pub fn new(tokens: Tensor) -> Result<Self> {
        tokens.dims2()?;
        if !tokens.is_finite() {
            return Err(Error::NonFinite {
                context: "token sequence".to_string(),
            });
        }
        Ok(TokenSequence { tokens })
    }

    /// Number of tokens K.
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    /// True when the sequence holds no tokens.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embedding dimension D.
    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Clone)]
struct BlockSlots {
    kernels: ParamSlot,
    bias: ParamSlot,
}

/// The trainable patch encoder.
#[derive(Clone)]
pub struct PatchEncoder {
    cfg: EncoderConfig,
    params: ParamSet,
    blocks: Vec<BlockSlots>,
    pool_w: ParamSlot,
    pool_b: ParamSlot,
    proj_w: ParamSlot,
    proj_b: ParamSlot,
    refine: MhaSlots,
}

impl PatchEncoder {
    /// Initialize parameters for the given configuration.
    pub fn new(cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut blocks = Vec::with_capacity(cfg.num_dense_blocks);
        for (b, &out_ch) in cfg.conv_channels.iter().enumerate() {
            let in_ch = cfg.block_in_channels(b);
            let kernels = params.add(
                format!("encoder.block{b}.kernels"),
                Tensor::xavier_uniform(
                    rng,
                    vec![out_ch, in_ch, cfg.kernel_width],
                    in_ch * cfg.kernel_width,
                    out_ch * cfg.kernel_width,
                ),
            );
            let bias = params.add(
                format!("encoder.block{b}.bias"),
                Tensor::zeros(vec![out_ch]),
            );
            blocks.push(BlockSlots { kernels, bias });
        }
        let c = cfg.feature_channels();
        let pool_w = params.add(
            "encoder.pool.score.weight",
            Tensor::xavier_uniform(rng, vec![c, 1], c, 1),
        );
        let pool_b = params.add("encoder.pool.score.bias", Tensor::zeros(vec![1]));
        let proj_w = params.add(
            "encoder.project.weight",
            Tensor::xavier_uniform(rng, vec![c, cfg.token_dim], c, cfg.token_dim),
        );
        let proj_b = params.add("encoder.project.bias", Tensor::zeros(vec![cfg.token_dim]));
        let refine = MhaSlots::init(&mut params, "encoder.refine", cfg.token_dim, rng);
        Ok(PatchEncoder {
            cfg,
            params,
            blocks,
            pool_w,
            pool_b,
            proj_w,
            proj_b,
            refine,
        })
    }

    /// Configuration used to build this encoder.
    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Parameter store.
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameter store (used by the optimizer and checkpoint loader).
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Register parameters on a tape as gradient targets.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.params.bind(tape)
    }

    /// Register parameters as frozen constants.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        self.params.bind_frozen(tape)
    }

    /// Dense-connected conv stack over one `[P, F]` patch, producing the
    /// `[P, C]` feature map of the final block. Block b consumes the channel
    /// concatenation of the patch and every previous block output.
    pub fn encode_patch(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        patch: ValueId,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let (p, f) = tape.value(patch).dims2()?;
        if p != self.cfg.patch_len || f != self.cfg.in_features {
            return Err(Error::shape(
                "encode_patch",
                format!(
                    "patch is {p}x{f}, encoder expects {}x{}",
                    self.cfg.patch_len, self.cfg.in_features
                ),
            ));
        }
        let pad = (self.cfg.kernel_width - 1) / 2;
        let mut carried = vec![tape.transpose2d(patch)?]; // channels-first [F, P]
        for block in &self.blocks {
            let stacked = if carried.len() == 1 {
                carried[0]
            } else {
                tape.concat_rows(&carried)?
            };
            let conv = tape.conv1d(
                stacked,
                binding.id(block.kernels),
                binding.id(block.bias),
                pad,
            )?;
            let mut activated = tape.gelu(conv);
            if let Some(rng) = dropout.as_deref_mut() {
                activated = tape.dropout(activated, self.cfg.dropout_rate, rng)?;
            }
            carried.push(activated);
        }
        let last = *carried.last().expect("at least one block");
        tape.transpose2d(last) // back to [P, C]
    }

    /// Softmax-weighted temporal pooling: learned scores over the P rows of
    /// a `[P, C]` feature map, output the weighted combination `[1, C]`.
    pub fn attention_pool(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        features: ValueId,
    ) -> Result<ValueId> {
        let scores = tape.matmul(features, binding.id(self.pool_w))?;
        let scores = tape.add_bias_row(scores, binding.id(self.pool_b))?;
        let scores_row = tape.transpose2d(scores)?; // [1, P]
        let weights = tape.softmax_last(scores_row)?;
        tape.matmul(weights, features)
    }

    /// Affine map from pooled features `[1, C]` to token space `[1, D]`.
    pub fn project_token(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        pooled: ValueId,
    ) -> Result<ValueId> {
        let projected = tape.matmul(pooled, binding.id(self.proj_w))?;
        tape.add_bias_row(projected, binding.id(self.proj_b))
    }

    /// Full per-patch pipeline: conv stack, pooling, projection.
    pub fn encode_patch_token(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        patch: ValueId,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let features = self.encode_patch(tape, binding, patch, dropout)?;
        let pooled = self.attention_pool(tape, binding, features)?;
        self.project_token(tape, binding, pooled)
    }

    /// One residual self-attention layer across the K tokens:
    /// `tokens + MHA(tokens)`.
    pub fn refine_tokens(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        tokens: ValueId,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        self.refine_tokens_grouped(tape, binding, tokens, 1, dropout)
    }

    /// Refinement over `groups` stacked token sequences; attention never
    /// crosses group boundaries.
    pub fn refine_tokens_grouped(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        tokens: ValueId,
        groups: usize,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let weights = self.refine.weights(binding);
        let mut attended =
            multi_head_attention_grouped(tape, tokens, &weights, self.cfg.refine_heads, groups)?;
        if let Some(rng) = dropout {
            attended = tape.dropout(attended, self.cfg.dropout_rate, rng)?;
        }
        tape.add(tokens, attended)
    }

    /// Pre-refinement token rows, one `[1, D]` value per patch.
    pub fn encode_token_rows(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        patches: &PatchSequence,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<ValueId>> {
        (0..patches.num_patches())
            .map(|k| {
                let patch = tape.constant(patches.patch(k));
                self.encode_patch_token(tape, binding, patch, dropout.as_deref_mut())
            })
            .collect()
    }

    /// Encode a whole patch sequence into `[K, D]` refined tokens.
    pub fn encode_sequence(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        patches: &PatchSequence,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId> {
        let rows = self.encode_token_rows(tape, binding, patches, dropout.as_deref_mut())?;
        let tokens = tape.concat_rows(&rows)?;
        self.refine_tokens(tape, binding, tokens, dropout)
    }

    /// Evaluation-mode encoding on a private tape: deterministic, dropout
    /// off, parameters untouched.
    pub fn encode_sequence_value(&self, patches: &PatchSequence) -> Result<TokenSequence> {
        let mut tape = Tape::new();
        let binding = self.bind_frozen(&mut tape);
        let tokens = self.encode_sequence(&mut tape, &binding, patches, None)?;
        TokenSequence::new(tape.value(tokens).clone())
    }
}
