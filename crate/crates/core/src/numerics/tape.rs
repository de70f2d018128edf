//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward op appends one node holding the output tensor plus the
//! recipe needed to push gradients back to its inputs. Nodes are stored in
//! topological order by construction, so one reverse sweep visits each node
//! exactly once.
//!
//! Ops validate shapes eagerly and report the offending axes; values are
//! checked for finiteness at the loss/optimizer boundary rather than per op.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        a: ValueId,
        factor: f64,
    },
    AddBiasRow {
        x: ValueId,
        bias: ValueId,
    },
    MatMul {
        a: ValueId,
        b: ValueId,
    },
    Transpose2d {
        a: ValueId,
    },
    Conv1d {
        input: ValueId,
        kernels: ValueId,
        bias: ValueId,
        pad_left: usize,
        pad_right: usize,
        dilation: usize,
        groups: usize,
    },
    Attention {
        q: ValueId,
        k: ValueId,
        v: ValueId,
        heads: usize,
        groups: usize,
        /// Softmax weights of the forward pass, `[G, H, K, K]` flattened.
        weights: Vec<f64>,
    },
    TileRows {
        x: ValueId,
        times: usize,
    },
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    SoftmaxLast {
        x: ValueId,
    },
    Gelu {
        x: ValueId,
        /// `tanh` of the cubic inner term, cached for the backward pass.
        tanh_inner: Vec<f64>,
    },
    MeanAll {
        x: ValueId,
    },
    SliceRows {
        x: ValueId,
        start: usize,
    },
    SliceCols {
        x: ValueId,
        start: usize,
        total_cols: usize,
    },
    ConcatRows {
        parts: Vec<ValueId>,
    },
    ConcatCols {
        parts: Vec<ValueId>,
    },
    Dropout {
        x: ValueId,
        scaled_mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Recorded computation: an append-only list of operations in topological
/// order. A tape and its parameters belong to a single training thread;
/// separate models build separate tapes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    /// Empty tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when nothing has been recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, mut tensor: Tensor, requires_grad: bool) -> ValueId {
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    /// Record a constant (never differentiated).
    pub fn constant(&mut self, tensor: Tensor) -> ValueId {
        self.leaf(tensor, false)
    }

    /// Output tensor of a node.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient of a node if backward has reached it.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn push_derived(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[ValueId],
        op: Op,
    ) -> ValueId {
        let requires_grad = inputs
            .iter()
            .any(|id| self.nodes[id.0].tensor.requires_grad);
        let mut tensor = Tensor::new(shape, data).expect("op produced inconsistent shape");
        tensor.requires_grad = requires_grad;
        self.push(tensor, op)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        Ok(self.push_derived(
            self.value(a).shape().to_vec(),
            data,
            &[a, b],
            Op::Add { a, b },
        ))
    }

    /// Elementwise difference.
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        Ok(self.push_derived(
            self.value(a).shape().to_vec(),
            data,
            &[a, b],
            Op::Sub { a, b },
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        Ok(self.push_derived(
            self.value(a).shape().to_vec(),
            data,
            &[a, b],
            Op::Mul { a, b },
        ))
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: ValueId, factor: f64) -> ValueId {
        let data = self.value(a).data().iter().map(|v| v * factor).collect();
        self.push_derived(
            self.value(a).shape().to_vec(),
            data,
            &[a],
            Op::Scale { a, factor },
        )
    }

    /// `x + bias` where `bias` is broadcast over the rows of a matrix.
    pub fn add_bias_row(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (rows, cols) = self.value(x).dims2()?;
        let blen = self.value(bias).numel();
        if blen != cols {
            return Err(Error::shape(
                "add_bias_row",
                format!("matrix has {} columns, bias has {} entries", cols, blen),
            ));
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(xv[r * cols + c] + bv[c]);
            }
        }
        Ok(self.push_derived(
            vec![rows, cols],
            data,
            &[x, bias],
            Op::AddBiasRow { x, bias },
        ))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions differ: lhs is {}x{}, rhs is {}x{}",
                    m, k, k2, n
                ),
            ));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push_derived(vec![m, n], data, &[a, b], Op::MatMul { a, b }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&mut self, a: ValueId) -> Result<ValueId> {
        let (rows, cols) = self.value(a).dims2()?;
        let av = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = av[r * cols + c];
            }
        }
        Ok(self.push_derived(vec![cols, rows], data, &[a], Op::Transpose2d { a }))
    }

    // ── Convolution ─────────────────────────────────────────────────────

    /// 1-D convolution with symmetric zero padding, per the usual
    /// channels-first layout: input `[C_in, L]`, kernels `[C_out, C_in, W]`,
    /// bias `[C_out]`, output `[C_out, L + 2*padding - W + 1]`.
    pub fn conv1d(
        &mut self,
        input: ValueId,
        kernels: ValueId,
        bias: ValueId,
        padding: usize,
    ) -> Result<ValueId> {
        self.conv1d_grouped(input, kernels, bias, padding, padding, 1, 1)
    }

    /// General 1-D convolution with independent left/right padding and
    /// dilation. Causal stacks use `pad_left = (W-1)*dilation, pad_right = 0`.
    pub fn conv1d_dilated(
        &mut self,
        input: ValueId,
        kernels: ValueId,
        bias: ValueId,
        pad_left: usize,
        pad_right: usize,
        dilation: usize,
    ) -> Result<ValueId> {
        self.conv1d_grouped(input, kernels, bias, pad_left, pad_right, dilation, 1)
    }

    /// Convolution over `groups` stacked inputs sharing one kernel set:
    /// input `[G*C_in, L]`, output `[G*C_out, L_out]`. Padding never bleeds
    /// across group boundaries, so batching preserves causality.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d_grouped(
        &mut self,
        input: ValueId,
        kernels: ValueId,
        bias: ValueId,
        pad_left: usize,
        pad_right: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<ValueId> {
        let (rows, len) = self.value(input).dims2()?;
        let (c_out, c_in, width) = self.value(kernels).dims3()?;
        if groups == 0 || rows != groups * c_in {
            return Err(Error::shape(
                "conv1d",
                format!("input has {rows} rows, kernels expect {c_in} channels x {groups} groups"),
            ));
        }
        if self.value(bias).numel() != c_out {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "bias has {} entries, kernels produce {} channels",
                    self.value(bias).numel(),
                    c_out
                ),
            ));
        }
        if width == 0 || dilation == 0 {
            return Err(Error::config(format!(
                "conv1d: kernel width ({width}) and dilation ({dilation}) must be >= 1"
            )));
        }
        let l_pad = len + pad_left + pad_right;
        let span = (width - 1) * dilation + 1;
        if span > l_pad {
            return Err(Error::config(format!(
                "conv1d: kernel span {span} (width {width}, dilation {dilation}) exceeds padded length {l_pad}"
            )));
        }
        let l_out = l_pad - span + 1;

        let padded = pad_rows(self.value(input).data(), rows, len, pad_left, pad_right);
        let kv = self.value(kernels).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; groups * c_out * l_out];
        for g in 0..groups {
            for c in 0..c_out {
                let orow = &mut out[(g * c_out + c) * l_out..(g * c_out + c + 1) * l_out];
                orow.fill(bv[c]);
                for i in 0..c_in {
                    let xrow = &padded[(g * c_in + i) * l_pad..(g * c_in + i + 1) * l_pad];
                    for w in 0..width {
                        let kval = kv[(c * c_in + i) * width + w];
                        let xs = &xrow[w * dilation..w * dilation + l_out];
                        for (o, x) in orow.iter_mut().zip(xs) {
                            *o += kval * x;
                        }
                    }
                }
            }
        }
        Ok(self.push_derived(
            vec![groups * c_out, l_out],
            out,
            &[input, kernels, bias],
            Op::Conv1d {
                input,
                kernels,
                bias,
                pad_left,
                pad_right,
                dilation,
                groups,
            },
        ))
    }

    /// Scaled dot-product attention over `groups` stacked sequences:
    /// `q`, `k`, `v` are `[G*K, D]` with `D = heads * head_dim`; per group
    /// and head, `softmax(Q Khᵀ / sqrt(head_dim)) Vh`. Groups never attend
    /// to each other.
    pub fn scaled_dot_attention(
        &mut self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
        heads: usize,
        groups: usize,
    ) -> Result<ValueId> {
        let (rows, d) = self.value(q).dims2()?;
        for (name, id) in [("k", k), ("v", v)] {
            let s = self.value(id).shape();
            if s != [rows, d] {
                return Err(Error::shape(
                    "scaled_dot_attention",
                    format!("q is {rows}x{d} but {name} is {s:?}"),
                ));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention heads must divide the embedding dimension: D={d}, heads={heads}"
            )));
        }
        if groups == 0 || rows % groups != 0 {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("{rows} rows do not split into {groups} equal groups"),
            ));
        }
        let seq = rows / groups;
        let head_dim = d / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut weights = vec![0.0; groups * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut qh = vec![0.0; seq * head_dim];
        let mut kh = vec![0.0; seq * head_dim];
        let mut vh = vec![0.0; seq * head_dim];
        for g in 0..groups {
            let base = g * seq;
            for h in 0..heads {
                let lo = h * head_dim;
                gather_head(qv, &mut qh, base, d, lo, head_dim);
                gather_head(kv, &mut kh, base, d, lo, head_dim);
                gather_head(vv, &mut vh, base, d, lo, head_dim);

                let wblock =
                    &mut weights[(g * heads + h) * seq * seq..(g * heads + h + 1) * seq * seq];
                matmul_nt_into(&qh, &kh, seq, head_dim, seq, wblock);
                for row in wblock.chunks_exact_mut(seq) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s * scale - max).exp();
                        sum += *s;
                    }
                    let inv = 1.0 / sum;
                    for s in row.iter_mut() {
                        *s *= inv;
                    }
                }
                let mixed = matmul_nn(wblock, &vh, seq, seq, head_dim);
                for (i, mrow) in mixed.chunks_exact(head_dim).enumerate() {
                    out[(base + i) * d + lo..(base + i) * d + lo + head_dim].copy_from_slice(mrow);
                }
            }
        }
        Ok(self.push_derived(
            vec![rows, d],
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                weights,
            },
        ))
    }

    /// Stack `times` copies of a matrix on top of each other.
    pub fn tile_rows(&mut self, x: ValueId, times: usize) -> Result<ValueId> {
        let (rows, cols) = self.value(x).dims2()?;
        if times == 0 {
            return Err(Error::config("tile_rows: times must be >= 1".to_string()));
        }
        let mut data = Vec::with_capacity(times * rows * cols);
        for _ in 0..times {
            data.extend_from_slice(self.value(x).data());
        }
        Ok(self.push_derived(
            vec![times * rows, cols],
            data,
            &[x],
            Op::TileRows { x, times },
        ))
    }

    // ── Normalization & activations ─────────────────────────────────────

    /// Layer normalization over the last axis, scaled by `gamma` and shifted
    /// by `beta` (both of length D). Uses the population variance.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::shape(
                "layer_norm",
                format!("last axis is empty: shape {:?}", shape),
            ));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma ({}) and beta ({}) must match last axis {}",
                    self.value(gamma).numel(),
                    self.value(beta).numel(),
                    d
                ),
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for (row, orow) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        Ok(self.push_derived(
            shape,
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&mut self, x: ValueId) -> Result<ValueId> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::shape(
                "softmax_last",
                format!("last axis is empty: shape {:?}", shape),
            ));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (row, orow) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push_derived(shape, out, &[x], Op::SoftmaxLast { x }))
    }

    /// Smooth ramp activation (tanh-form GELU), elementwise.
    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x).data();
        let mut tanh_inner = Vec::with_capacity(xv.len());
        let data = xv
            .iter()
            .map(|&v| {
                let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                tanh_inner.push(t);
                0.5 * v * (1.0 + t)
            })
            .collect();
        self.push_derived(
            self.value(x).shape().to_vec(),
            data,
            &[x],
            Op::Gelu { x, tanh_inner },
        )
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape(
                "mean_all",
                "tensor has no elements".to_string(),
            ));
        }
        let mean = self.value(x).data().iter().sum::<f64>() / n as f64;
        Ok(self.push_derived(vec![1], vec![mean], &[x], Op::MeanAll { x }))
    }

    // ── Slicing & concatenation (rank 2) ────────────────────────────────

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (rows, cols) = self.value(x).dims2()?;
        if start >= end || end > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {}..{} out of range for {} rows", start, end, rows),
            ));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        Ok(self.push_derived(
            vec![end - start, cols],
            data,
            &[x],
            Op::SliceRows { x, start },
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (rows, cols) = self.value(x).dims2()?;
        if start >= end || end > cols {
            return Err(Error::shape(
                "slice_cols",
                format!(
                    "columns {}..{} out of range for {} columns",
                    start, end, cols
                ),
            ));
        }
        let width = end - start;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv[r * cols + start..r * cols + end]);
        }
        Ok(self.push_derived(
            vec![rows, width],
            data,
            &[x],
            Op::SliceCols {
                x,
                start,
                total_cols: cols,
            },
        ))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::shape(
                "concat_rows",
                "no tensors to concatenate".to_string(),
            ));
        }
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("expected {} columns, one part has {}", cols, c),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push_derived(
            vec![rows, cols],
            data,
            parts,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Place matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::shape(
                "concat_cols",
                "no tensors to concatenate".to_string(),
            ));
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("expected {} rows, one part has {}", rows, r),
                ));
            }
            widths.push(c);
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p).data();
                data.extend_from_slice(&pv[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push_derived(
            vec![rows, cols],
            data,
            parts,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    // ── Regularization ──────────────────────────────────────────────────

    /// Inverted dropout: keeps entries with probability `1 - rate` and
    /// rescales by `1/(1 - rate)`. `rate == 0` is the identity (no node).
    pub fn dropout(&mut self, x: ValueId, rate: f64, rng: &mut ChaCha8Rng) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let scaled_mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let data = zip_map(self.value(x).data(), &scaled_mask, |v, m| v * m);
        Ok(self.push_derived(
            self.value(x).shape().to_vec(),
            data,
            &[x],
            Op::Dropout { x, scaled_mask },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Visits each node once, in reverse
    /// topological order, accumulating gradients into every node whose
    /// subtree contains a `requires_grad` leaf.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        let loss_tensor = &self.nodes[loss.0].tensor;
        if loss_tensor.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_tensor.shape()),
            ));
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].tensor.grad.is_none() || !self.nodes[i].tensor.requires_grad {
                continue;
            }
            self.backward_node(i);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize) {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let g = node
            .tensor
            .grad
            .as_deref()
            .expect("backward_node called without grad");

        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                accumulate(before, *a, g);
                accumulate(before, *b, g);
            }
            Op::Sub { a, b } => {
                accumulate(before, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(before, *b, &neg);
            }
            Op::Mul { a, b } => {
                let da = zip_map(g, before[b.0].tensor.data(), |gv, bv| gv * bv);
                let db = zip_map(g, before[a.0].tensor.data(), |gv, av| gv * av);
                accumulate(before, *a, &da);
                accumulate(before, *b, &db);
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = g.iter().map(|v| v * factor).collect();
                accumulate(before, *a, &da);
            }
            Op::AddBiasRow { x, bias } => {
                let cols = before[bias.0].tensor.numel();
                let mut db = vec![0.0; cols];
                for row in g.chunks_exact(cols) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(before, *x, g);
                accumulate(before, *bias, &db);
            }
            Op::MatMul { a, b } => {
                let (m, k) = before[a.0].tensor.dims2().unwrap();
                let n = before[b.0].tensor.shape()[1];
                let da = matmul_nt(g, before[b.0].tensor.data(), m, n, k);
                let db = matmul_tn(before[a.0].tensor.data(), g, m, k, n);
                accumulate(before, *a, &da);
                accumulate(before, *b, &db);
            }
            Op::Transpose2d { a } => {
                let (rows, cols) = before[a.0].tensor.dims2().unwrap();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = g[c * rows + r];
                    }
                }
                accumulate(before, *a, &da);
            }
            Op::Conv1d {
                input,
                kernels,
                bias,
                pad_left,
                pad_right,
                dilation,
                groups,
            } => {
                let (rows, len) = before[input.0].tensor.dims2().unwrap();
                let (c_out, c_in, width) = before[kernels.0].tensor.dims3().unwrap();
                let l_pad = len + pad_left + pad_right;
                let l_out = l_pad - (width - 1) * dilation;
                let padded = pad_rows(
                    before[input.0].tensor.data(),
                    rows,
                    len,
                    *pad_left,
                    *pad_right,
                );
                let kv = before[kernels.0].tensor.data();

                let mut db = vec![0.0; c_out];
                let mut dk = vec![0.0; c_out * c_in * width];
                let mut dpad = vec![0.0; rows * l_pad];
                for gi in 0..*groups {
                    for c in 0..c_out {
                        let grow = &g[(gi * c_out + c) * l_out..(gi * c_out + c + 1) * l_out];
                        db[c] += grow.iter().sum::<f64>();
                        for i in 0..c_in {
                            let row = gi * c_in + i;
                            let xrow = &padded[row * l_pad..(row + 1) * l_pad];
                            let drow = &mut dpad[row * l_pad..(row + 1) * l_pad];
                            for w in 0..width {
                                let off = w * dilation;
                                let kval = kv[(c * c_in + i) * width + w];
                                let xs = &xrow[off..off + l_out];
                                dk[(c * c_in + i) * width + w] +=
                                    grow.iter().zip(xs).map(|(&gv, &x)| gv * x).sum::<f64>();
                                let ds = &mut drow[off..off + l_out];
                                for (dv, &gv) in ds.iter_mut().zip(grow) {
                                    *dv += gv * kval;
                                }
                            }
                        }
                    }
                }
                let mut dx = vec![0.0; rows * len];
                for r in 0..rows {
                    dx[r * len..(r + 1) * len]
                        .copy_from_slice(&dpad[r * l_pad + pad_left..r * l_pad + pad_left + len]);
                }
                accumulate(before, *input, &dx);
                accumulate(before, *kernels, &dk);
                accumulate(before, *bias, &db);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                weights,
            } => {
                let (rows, d) = before[q.0].tensor.dims2().unwrap();
                let seq = rows / groups;
                let head_dim = d / heads;
                let scale = 1.0 / (head_dim as f64).sqrt();
                let qv = before[q.0].tensor.data();
                let kvv = before[k.0].tensor.data();
                let vv = before[v.0].tensor.data();

                let mut dq = vec![0.0; rows * d];
                let mut dkv = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut qh = vec![0.0; seq * head_dim];
                let mut kh = vec![0.0; seq * head_dim];
                let mut vh = vec![0.0; seq * head_dim];
                let mut gh = vec![0.0; seq * head_dim];
                let mut da = vec![0.0; seq * seq];
                for gi in 0..*groups {
                    let base = gi * seq;
                    for h in 0..*heads {
                        let lo = h * head_dim;
                        gather_head(qv, &mut qh, base, d, lo, head_dim);
                        gather_head(kvv, &mut kh, base, d, lo, head_dim);
                        gather_head(vv, &mut vh, base, d, lo, head_dim);
                        gather_head(g, &mut gh, base, d, lo, head_dim);
                        let a = &weights
                            [(gi * heads + h) * seq * seq..(gi * heads + h + 1) * seq * seq];

                        // dV = Aᵀ G_h, dA = G_h Vᵀ.
                        let dvh = matmul_tn(a, &gh, seq, seq, head_dim);
                        matmul_nt_into(&gh, &vh, seq, head_dim, seq, &mut da);
                        // Softmax backward rescaled into dS (reusing da).
                        for (ds_row, a_row) in da.chunks_exact_mut(seq).zip(a.chunks_exact(seq)) {
                            let dot: f64 = ds_row.iter().zip(a_row).map(|(&x, &w)| x * w).sum();
                            for (s, &w) in ds_row.iter_mut().zip(a_row) {
                                *s = w * (*s - dot) * scale;
                            }
                        }
                        // dQ = dS K_h, dK = dSᵀ Q_h.
                        let dqh = matmul_nn(&da, &kh, seq, seq, head_dim);
                        let dkh = matmul_tn(&da, &qh, seq, seq, head_dim);

                        scatter_head_add(&mut dq, &dqh, base, d, lo, head_dim);
                        scatter_head_add(&mut dkv, &dkh, base, d, lo, head_dim);
                        scatter_head_add(&mut dv, &dvh, base, d, lo, head_dim);
                    }
                }
                accumulate(before, *q, &dq);
                accumulate(before, *k, &dkv);
                accumulate(before, *v, &dv);
            }
            Op::TileRows { x, times } => {
                let n = before[x.0].tensor.numel();
                let mut dx = vec![0.0; n];
                for rep in 0..*times {
                    for (d, &gv) in dx.iter_mut().zip(&g[rep * n..(rep + 1) * n]) {
                        *d += gv;
                    }
                }
                accumulate(before, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let d = before[gamma.0].tensor.numel();
                let xv = before[x.0].tensor.data();
                let gv = before[gamma.0].tensor.data();
                let n = xv.len();
                let mut dx = vec![0.0; n];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (row_idx, (row, grow)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).enumerate()
                {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let base = row_idx * d;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gv[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let df = d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gv[j];
                        dx[base + j] =
                            inv_std / df * (df * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                accumulate(before, *x, &dx);
                accumulate(before, *gamma, &dgamma);
                accumulate(before, *beta, &dbeta);
            }
            Op::SoftmaxLast { x } => {
                let shape = node.tensor.shape();
                let d = *shape.last().unwrap();
                let sv = node.tensor.data();
                let mut dx = vec![0.0; sv.len()];
                for ((srow, grow), drow) in sv
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, gv)| s * gv).sum();
                    for j in 0..d {
                        drow[j] = srow[j] * (grow[j] - dot);
                    }
                }
                accumulate(before, *x, &dx);
            }
            Op::Gelu { x, tanh_inner } => {
                let xv = before[x.0].tensor.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .zip(tanh_inner)
                    .map(|((&gv, &v), &t)| {
                        let sech2 = 1.0 - t * t;
                        gv * (0.5 * (1.0 + t)
                            + 0.5 * v * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * v * v))
                    })
                    .collect();
                accumulate(before, *x, &dx);
            }
            Op::MeanAll { x } => {
                let n = before[x.0].tensor.numel();
                let dv = g[0] / n as f64;
                let dx = vec![dv; n];
                accumulate(before, *x, &dx);
            }
            Op::SliceRows { x, start } => {
                let (_, cols) = before[x.0].tensor.dims2().unwrap();
                let n = before[x.0].tensor.numel();
                let mut dx = vec![0.0; n];
                dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                accumulate(before, *x, &dx);
            }
            Op::SliceCols {
                x,
                start,
                total_cols,
            } => {
                let rows = node.tensor.shape()[0];
                let width = node.tensor.shape()[1];
                let mut dx = vec![0.0; rows * total_cols];
                for r in 0..rows {
                    dx[r * total_cols + start..r * total_cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                accumulate(before, *x, &dx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = before[p.0].tensor.numel();
                    accumulate(before, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.tensor.shape()[0];
                let cols = node.tensor.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = before[p.0].tensor.shape()[1];
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * cols + offset..r * cols + offset + w]);
                    }
                    accumulate(before, p, &dp);
                    offset += w;
                }
            }
            Op::Dropout { x, scaled_mask } => {
                let dx = zip_map(g, scaled_mask, |gv, m| gv * m);
                accumulate(before, *x, &dx);
            }
        }
    }

    fn check_same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::shape(
                op,
                format!("lhs shape {:?} vs rhs shape {:?}", sa, sb),
            ));
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [Node], id: ValueId, contribution: &[f64]) {
    let tensor = &mut nodes[id.0].tensor;
    if !tensor.requires_grad {
        return;
    }
    match tensor.grad.as_mut() {
        Some(grad) => {
            for (gv, cv) in grad.iter_mut().zip(contribution) {
                *gv += cv;
            }
        }
        None => tensor.grad = Some(contribution.to_vec()),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn pad_rows(data: &[f64], rows: usize, len: usize, pad_left: usize, pad_right: usize) -> Vec<f64> {
    if pad_left == 0 && pad_right == 0 {
        return data.to_vec();
    }
    let l_pad = len + pad_left + pad_right;
    let mut out = vec![0.0; rows * l_pad];
    for r in 0..rows {
        out[r * l_pad + pad_left..r * l_pad + pad_left + len]
            .copy_from_slice(&data[r * len..(r + 1) * len]);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `A[m,k] * B[k,n]`, all row-major. Rows are processed four at a time so
/// each B row streams through once per block instead of once per row.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        let (o01, o23) = out[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (o0, o1) = o01.split_at_mut(n);
        let (o2, o3) = o23.split_at_mut(n);
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
            for (j, &bv) in brow.iter().enumerate() {
                o0[j] += v0 * bv;
                o1[j] += v1 * bv;
                o2[j] += v2 * bv;
                o3[j] += v3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
        i += 1;
    }
    out
}

/// `A[m,k] * B[n,k]^T`: rows of both operands are contiguous dot products.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_nt_into(a, b, m, k, n, &mut out);
    out
}

fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for (p, &bv) in brow.iter().enumerate() {
                s0 += a0[p] * bv;
                s1 += a1[p] * bv;
                s2 += a2[p] * bv;
                s3 += a3[p] * bv;
            }
            out[i * n + j] = s0;
            out[(i + 1) * n + j] = s1;
            out[(i + 2) * n + j] = s2;
            out[(i + 3) * n + j] = s3;
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
        i += 1;
    }
}

/// Copy one head's columns (`lo..lo+head_dim`) of rows `base..base+seq`
/// into a contiguous `[seq, head_dim]` buffer.
fn gather_head(src: &[f64], dst: &mut [f64], base: usize, d: usize, lo: usize, head_dim: usize) {
    for (i, drow) in dst.chunks_exact_mut(head_dim).enumerate() {
        let off = (base + i) * d + lo;
        drow.copy_from_slice(&src[off..off + head_dim]);
    }
}

/// Add a contiguous `[seq, head_dim]` block back into one head's columns.
fn scatter_head_add(
    dst: &mut [f64],
    src: &[f64],
    base: usize,
    d: usize,
    lo: usize,
    head_dim: usize,
) {
    for (i, srow) in src.chunks_exact(head_dim).enumerate() {
        let off = (base + i) * d + lo;
        for (o, &v) in dst[off..off + head_dim].iter_mut().zip(srow) {
            *o += v;
        }
    }
}

/// `A[m,k]^T * B[m,n]`, accumulated four source rows per pass.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let orow = &mut out[p * n..(p + 1) * n];
            let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..n {
                orow[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
            }
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
        i += 1;
    }
    out
}
