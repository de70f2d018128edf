//! Multi-head scaled dot-product self-attention, composed from tape ops.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::params::{Binding, ParamSet, ParamSlot};
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::Tensor;

/// Tape handles for one attention layer's projections.
#[derive(Copy, Clone, Debug)]
pub struct MhaWeights {
    pub w_q: ValueId,
    pub b_q: ValueId,
    pub w_k: ValueId,
    pub b_k: ValueId,
    pub w_v: ValueId,
    pub b_v: ValueId,
    pub w_o: ValueId,
    pub b_o: ValueId,
}

/// Parameter slots for one attention layer: four `[D, D]` projections with
/// biases, registered under `<prefix>.{q,k,v,o}.{weight,bias}`.
#[derive(Clone, Debug)]
pub struct MhaSlots {
    w_q: ParamSlot,
    b_q: ParamSlot,
    w_k: ParamSlot,
    b_k: ParamSlot,
    w_v: ParamSlot,
    b_v: ParamSlot,
    w_o: ParamSlot,
    b_o: ParamSlot,
}

impl MhaSlots {
    /// Allocate the projections in `params` with Xavier-uniform weights and
    /// zero biases.
    pub fn init(params: &mut ParamSet, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = |name: &str, rng: &mut ChaCha8Rng| {
            params.add(
                format!("{prefix}.{name}.weight"),
                Tensor::xavier_uniform(rng, vec![dim, dim], dim, dim),
            )
        };
        let w_q = mat("q", rng);
        let w_k = mat("k", rng);
        let w_v = mat("v", rng);
        let w_o = mat("o", rng);
        let mut vec =
            |name: &str| params.add(format!("{prefix}.{name}.bias"), Tensor::zeros(vec![dim]));
        let b_q = vec("q");
        let b_k = vec("k");
        let b_v = vec("v");
        let b_o = vec("o");
        MhaSlots {
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
        }
    }

    /// Resolve the slots against a tape binding.
    pub fn weights(&self, binding: &Binding) -> MhaWeights {
        MhaWeights {
            w_q: binding.id(self.w_q),
            b_q: binding.id(self.b_q),
            w_k: binding.id(self.w_k),
            b_k: binding.id(self.b_k),
            w_v: binding.id(self.w_v),
            b_v: binding.id(self.b_v),
            w_o: binding.id(self.w_o),
            b_o: binding.id(self.b_o),
        }
    }
}

/// Standard bidirectional multi-head self-attention over a `[K, D]` token
/// matrix: per head, `softmax(Q Kᵀ / sqrt(D/H)) V`, heads concatenated and
/// output-projected. Differentiable through the input and all projections.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: ValueId,
    weights: &MhaWeights,
    heads: usize,
) -> Result<ValueId> {
    multi_head_attention_grouped(tape, x, weights, heads, 1)
}

/// Batched variant: `x` holds `groups` stacked `[K, D]` sequences that share
/// the projections but never attend across group boundaries.
pub fn multi_head_attention_grouped(
    tape: &mut Tape,
    x: ValueId,
    weights: &MhaWeights,
    heads: usize,
    groups: usize,
) -> Result<ValueId> {
    let (_, d) = tape.value(x).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "attention heads must divide the embedding dimension: D={d}, heads={heads}"
        )));
    }
    let q = tape.matmul(x, weights.w_q)?;
    let q = tape.add_bias_row(q, weights.b_q)?;
    let k = tape.matmul(x, weights.w_k)?;
    let k = tape.add_bias_row(k, weights.b_k)?;
    let v = tape.matmul(x, weights.w_v)?;
    let v = tape.add_bias_row(v, weights.b_v)?;
    let attended = tape.scaled_dot_attention(q, k, v, heads, groups)?;
    let out = tape.matmul(attended, weights.w_o)?;
    tape.add_bias_row(out, weights.b_o)
}
