//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] owns every value produced during a forward pass. Nodes are
//! appended in execution order, so node ids are already a topological order
//! and the backward pass is a single reverse sweep.

use rand::Rng;

use super::kernels::{axpy, dot, for_chunks, gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulBt,
    Add,
    Mul,
    Scale,
    AddBias,
    Gelu,
    LayerNorm,
    Embedding,
    CrossEntropy,
    Sum,
    CausalSoftmax,
    SplitHeads,
    SliceHeads,
    ConcatHeads,
    MergeHeads,
    Attention,
    Dropout,
    Reshape,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<OpKind> {
        use OpKind::*;
        Some(match name {
            "matmul" => MatMul,
            "matmul_bt" => MatMulBt,
            "add" => Add,
            "mul" => Mul,
            "scale" => Scale,
            "add_bias" => AddBias,
            "gelu" => Gelu,
            "layer_norm" => LayerNorm,
            "embedding" => Embedding,
            "cross_entropy" => CrossEntropy,
            "sum" => Sum,
            "causal_softmax" => CausalSoftmax,
            "split_heads" => SplitHeads,
            "slice_heads" => SliceHeads,
            "concat_heads" => ConcatHeads,
            "merge_heads" => MergeHeads,
            "attention" => Attention,
            "dropout" => Dropout,
            "reshape" => Reshape,
            _ => return None,
        })
    }
}

/// Head-major layout used by attention: `[batch, heads, seq, head_dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct HeadLayout {
    batch: usize,
    heads: usize,
    seq: usize,
    head_dim: usize,
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: S },
    AddBias { x: Var, bias: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Option<Var>, xhat: Vec<S>, rstd: Vec<S> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    Sum { x: Var },
    CausalSoftmax { x: Var },
    SplitHeads { x: Var, part: usize, parts: usize, layout: HeadLayout },
    SliceHeads { x: Var, start: usize, src_heads: usize },
    ConcatHeads { a: Var, b: Var },
    MergeHeads { x: Var, layout: HeadLayout },
    Attention { q: Var, k: Var, v: Var, probs: Vec<S> },
    Dropout { x: Var, mask: Vec<S> },
    Reshape { x: Var },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::MatMulBt { .. } => OpKind::MatMulBt,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
            Op::CausalSoftmax { .. } => OpKind::CausalSoftmax,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::SliceHeads { .. } => OpKind::SliceHeads,
            Op::ConcatHeads { .. } => OpKind::ConcatHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::Attention { .. } => OpKind::Attention,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::MatMulBt { a, b }
            | Op::Add { a, b }
            | Op::Mul { a, b }
            | Op::ConcatHeads { a, b } => vec![a, b],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::LayerNorm { x, gain, bias, .. } => {
                let mut v = vec![x, gain];
                v.extend(bias);
                v
            }
            Op::Embedding { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Sum { x }
            | Op::CausalSoftmax { x }
            | Op::SplitHeads { x, .. }
            | Op::SliceHeads { x, .. }
            | Op::MergeHeads { x, .. }
            | Op::Dropout { x, .. }
            | Op::Reshape { x } => vec![x],
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

/// Recorded computation graph for one forward/backward pass.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    parallel: bool,
    macs: u64,
    backward_done: bool,
    corrupted: Option<OpKind>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    half * x * (S::ONE + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    let du = c * (S::ONE + S::from_f64(3.0) * a * x * x);
    half * (S::ONE + th) + half * x * (S::ONE - th * th) * du
}

/// Row-wise causal softmax in place over a `[t, t]` block: row `i` is
/// normalised over columns `0..=i`, later columns are set to exactly zero.
fn causal_softmax_rows<S: Scalar>(block: &mut [S], t: usize) {
    for i in 0..t {
        let row = &mut block[i * t..(i + 1) * t];
        let mut mx = S::NEG_INFINITY;
        for &v in &row[..=i] {
            mx = mx.max(v);
        }
        let mut sum = S::ZERO;
        for v in &mut row[..=i] {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = S::ONE / sum;
        for v in &mut row[..=i] {
            *v *= inv;
        }
        for v in &mut row[i + 1..] {
            *v = S::ZERO;
        }
    }
}

fn head_layout(shape: &[usize], op: &'static str) -> Result<HeadLayout> {
    match *shape {
        [batch, heads, seq, head_dim] => Ok(HeadLayout {
            batch,
            heads,
            seq,
            head_dim,
        }),
        _ => Err(Error::dim(op, shape, &[0, 0, 0, 0])),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            parallel: false,
            macs: 0,
            backward_done: false,
            corrupted: None,
        }
    }

    /// Enables row-sharded parallel kernels. Results are unchanged.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    /// Test fixture: negates the gradient emitted by every node of `kind`.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupted = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by forward matmul and attention ops.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward root with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.nodes[v.0].grad.take()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
            assert!(
                value.all_finite(),
                "{:?} produced a non-finite value from finite inputs",
                op.kind()
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::ZERO; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, self.parallel);
        self.macs += (m * k * n) as u64;
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_bt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::dim("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::ZERO; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, self.parallel);
        self.macs += (m * k * n) as u64;
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMulBt { a, b }))
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = S::from_f64(factor);
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&v| v * factor).collect())?;
        Ok(self.push(value, Op::Scale { x, factor }))
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tb.numel();
        if tb.shape().len() != 1 || tx.shape().last() != Some(&n) {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&v| gelu_scalar(v)).collect())?;
        Ok(self.push(value, Op::Gelu { x }))
    }

    /// Normalises each row of `x[..., d]` to zero mean and unit (population)
    /// variance, then applies `gain` and optional `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Option<Var>, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let tx = self.value(x);
        let d = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm", tx.shape(), self.shape(gain)))?;
        let tg = self.value(gain);
        if tg.shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d] {
                return Err(Error::dim("layer_norm", tx.shape(), self.shape(b)));
            }
        }
        let rows = tx.numel().checked_div(d).unwrap_or(0);
        let eps = S::from_f64(eps);
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut xhat = vec![S::ZERO; tx.numel()];
        let mut rstd = vec![S::ZERO; rows];
        let mut out = vec![S::ZERO; tx.numel()];
        let gd = tg.data();
        let bd = bias.map(|b| self.value(b).data());
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                let mut y = xh * gd[j];
                if let Some(bd) = bd {
                    y += bd[j];
                }
                out[r * d + j] = y;
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of `table[V, C]`; output `[ids.len(), C]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.matrix_dims(table, "embedding")?;
        let tt = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    limit: v,
                });
            }
            out.extend_from_slice(&tt[id * c..(id + 1) * c]);
        }
        let value = Tensor::new([ids.len(), c], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[N, V]`, stabilised by subtracting each row's maximum.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if n == 0 {
            return Err(Error::Contract("cross_entropy over zero rows".into()));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![S::ZERO; n * v];
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "target id",
                    index: t,
                    limit: v,
                });
            }
            let row = &ld[r * v..(r + 1) * v];
            let mx = row.iter().fold(S::NEG_INFINITY, |m, &x| m.max(x));
            let p = &mut probs[r * v..(r + 1) * v];
            let mut sum = S::ZERO;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - mx).exp();
                sum += *pi;
            }
            let inv = S::ONE / sum;
            for pi in p.iter_mut() {
                *pi *= inv;
            }
            let lse = mx + sum.ln();
            total += (lse - row[t]).to_f64();
        }
        let value = Tensor::scalar(S::from_f64(total / n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        Ok(self.push(Tensor::scalar(S::from_f64(total)), Op::Sum { x }))
    }

    /// Causal softmax over the trailing `[T, T]` dims of `x`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let t = match shape.len() {
            r if r >= 2 && shape[r - 1] == shape[r - 2] => shape[r - 1],
            _ => return Err(Error::dim("causal_softmax", &shape, &shape)),
        };
        let mut data = self.value(x).data().to_vec();
        for block in data.chunks_exact_mut((t * t).max(1)) {
            causal_softmax_rows(block, t);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::CausalSoftmax { x }))
    }

    /// Extracts column block `part` of `x[B*T, parts*C]` as `[B, heads, T, C/heads]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize, part: usize, parts: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "split_heads")?;
        if batch == 0 || rows % batch != 0 || cols % parts != 0 || part >= parts {
            return Err(Error::dim("split_heads", &[rows, cols], &[batch, heads, part, parts]));
        }
        let c = cols / parts;
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::dim("split_heads", &[rows, cols], &[batch, heads, part, parts]));
        }
        let layout = HeadLayout {
            batch,
            heads,
            seq: rows / batch,
            head_dim: c / heads,
        };
        let HeadLayout { seq, head_dim: d, .. } = layout;
        let src = self.value(x).data();
        let mut out = vec![S::ZERO; rows * c];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let s = (b * seq + t) * cols + part * c + h * d;
                    let o = ((b * heads + h) * seq + t) * d;
                    out[o..o + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        let value = Tensor::new([batch, heads, seq, d], out)?;
        Ok(self.push(value, Op::SplitHeads { x, part, parts, layout }))
    }

    /// Heads `start..end` of `x[B, h, T, d]`.
    pub fn slice_heads(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let l = head_layout(self.shape(x), "slice_heads")?;
        if start > end || end > l.heads {
            return Err(Error::dim("slice_heads", self.shape(x), &[start, end]));
        }
        let block = l.seq * l.head_dim;
        let n = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(l.batch * n * block);
        for b in 0..l.batch {
            let o = (b * l.heads + start) * block;
            out.extend_from_slice(&src[o..o + n * block]);
        }
        let value = Tensor::new([l.batch, n, l.seq, l.head_dim], out)?;
        Ok(self.push(
            value,
            Op::SliceHeads {
                x,
                start,
                src_heads: l.heads,
            },
        ))
    }

    /// Concatenates `a[B, h1, T, d]` and `b[B, h2, T, d]` along the head axis.
    pub fn concat_heads(&mut self, a: Var, b: Var) -> Result<Var> {
        let la = head_layout(self.shape(a), "concat_heads")?;
        let lb = head_layout(self.shape(b), "concat_heads")?;
        if (la.batch, la.seq, la.head_dim) != (lb.batch, lb.seq, lb.head_dim) {
            return Err(Error::dim("concat_heads", self.shape(a), self.shape(b)));
        }
        let block = la.seq * la.head_dim;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for bi in 0..la.batch {
            out.extend_from_slice(&da[bi * la.heads * block..(bi + 1) * la.heads * block]);
            out.extend_from_slice(&db[bi * lb.heads * block..(bi + 1) * lb.heads * block]);
        }
        let value = Tensor::new([la.batch, la.heads + lb.heads, la.seq, la.head_dim], out)?;
        Ok(self.push(value, Op::ConcatHeads { a, b }))
    }

    /// `[B, h, T, d]` back to `[B*T, h*d]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let layout = head_layout(self.shape(x), "merge_heads")?;
        let HeadLayout {
            batch,
            heads,
            seq,
            head_dim: d,
        } = layout;
        let src = self.value(x).data();
        let cols = heads * d;
        let mut out = vec![S::ZERO; batch * seq * cols];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let s = ((b * heads + h) * seq + t) * d;
                    let o = (b * seq + t) * cols + h * d;
                    out[o..o + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        let value = Tensor::new([batch * seq, cols], out)?;
        Ok(self.push(value, Op::MergeHeads { x, layout }))
    }

    /// Scaled dot-product attention with a causal mask over the trailing
    /// `[T, d]` dims; leading dims index independent heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() {
            return Err(Error::dim("attention", &shape, self.shape(k)));
        }
        if self.shape(v) != shape.as_slice() {
            return Err(Error::dim("attention", &shape, self.shape(v)));
        }
        if shape.len() < 2 {
            return Err(Error::dim("attention", &shape, &[0, 0]));
        }
        let (t, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let groups = self.value(q).numel().checked_div(t * d).unwrap_or(0);
        let scale = S::from_f64(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let par = self.parallel && groups > 1;

        let mut probs = vec![S::ZERO; groups * t * t];
        for_chunks(par, &mut probs, t * t, |g, p| {
            let qg = &qd[g * t * d..(g + 1) * t * d];
            let kg = &kd[g * t * d..(g + 1) * t * d];
            for i in 0..t {
                let qi = &qg[i * d..(i + 1) * d];
                for j in 0..=i {
                    p[i * t + j] = dot(qi, &kg[j * d..(j + 1) * d]) * scale;
                }
            }
            causal_softmax_rows(p, t);
        });
        let mut out = vec![S::ZERO; groups * t * d];
        for_chunks(par, &mut out, t * d, |g, o| {
            let pg = &probs[g * t * t..(g + 1) * t * t];
            let vg = &vd[g * t * d..(g + 1) * t * d];
            for i in 0..t {
                let oi = &mut o[i * d..(i + 1) * d];
                for j in 0..=i {
                    axpy(pg[i * t + j], &vg[j * d..(j + 1) * d], oi);
                }
            }
        });
        // Q·Kᵀ and P·V over the causal triangle.
        self.macs += (groups * t * (t + 1) * d) as u64;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Attention { q, k, v, probs }))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let t = self.value(x);
        let mask: Vec<S> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { S::ZERO } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Forgets leaf gradients so that [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Propagates d`loss`/d(leaf) into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Contract(
                "backward root does not depend on any differentiable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), S::ONE));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].grad = Some(g);
                continue;
            }
            let negate = self.corrupted == Some(self.nodes[i].op.kind());
            for (v, mut contrib) in self.vjp(i, &g)? {
                if negate {
                    contrib.data_mut().iter_mut().for_each(|x| *x = -*x);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each input that needs a gradient.
    fn vjp(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let par = self.parallel;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![S::ZERO; m * k];
                    gemm_nt(gd, self.value(b).data(), &mut da, m, n, k, par);
                    out.push((a, Tensor::new([m, k], da)?));
                }
                if self.needs(b) {
                    let mut db = vec![S::ZERO; k * n];
                    gemm_tn(self.value(a).data(), gd, &mut db, k, m, n, par);
                    out.push((b, Tensor::new([k, n], db)?));
                }
            }
            &Op::MatMulBt { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.needs(a) {
                    let mut da = vec![S::ZERO; m * k];
                    gemm_nn(gd, self.value(b).data(), &mut da, m, n, k, par);
                    out.push((a, Tensor::new([m, k], da)?));
                }
                if self.needs(b) {
                    let mut db = vec![S::ZERO; n * k];
                    gemm_tn(gd, self.value(a).data(), &mut db, n, m, k, par);
                    out.push((b, Tensor::new([n, k], db)?));
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let d = gd.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    out.push((a, Tensor::new(va.shape(), d)?));
                }
                if self.needs(b) {
                    let d = gd.iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    out.push((b, Tensor::new(vb.shape(), d)?));
                }
            }
            &Op::Scale { x, factor } => {
                if self.needs(x) {
                    out.push((x, Tensor::new(g.shape(), gd.iter().map(|&v| v * factor).collect())?));
                }
            }
            &Op::AddBias { x, bias } => {
                if self.needs(x) {
                    out.push((x, g.clone()));
                }
                if self.needs(bias) {
                    let n = self.value(bias).numel();
                    let mut db = vec![S::ZERO; n];
                    for row in gd.chunks_exact(n) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((bias, Tensor::new([n], db)?));
                }
            }
            &Op::Gelu { x } => {
                if self.needs(x) {
                    let xv = self.value(x);
                    let d = gd
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    out.push((x, Tensor::new(xv.shape(), d)?));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain) = (*x, *gain);
                let gv = self.value(gain).data();
                let d = gv.len();
                let rows = rstd.len();
                if self.needs(gain) {
                    let mut dg = vec![S::ZERO; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                    out.push((gain, Tensor::new([d], dg)?));
                }
                if let Some(b) = *bias {
                    if self.needs(b) {
                        let mut db = vec![S::ZERO; d];
                        for row in gd.chunks_exact(d) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        out.push((b, Tensor::new([d], db)?));
                    }
                }
                if self.needs(x) {
                    let inv_d = S::from_f64(1.0 / d as f64);
                    let mut dx = vec![S::ZERO; rows * d];
                    let mut dxhat = vec![S::ZERO; d];
                    for r in 0..rows {
                        let mut mean_dxh = S::ZERO;
                        let mut mean_dxh_xh = S::ZERO;
                        for j in 0..d {
                            let v = gd[r * d + j] * gv[j];
                            dxhat[j] = v;
                            mean_dxh += v;
                            mean_dxh_xh += v * xhat[r * d + j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..d {
                            dx[r * d + j] =
                                rstd[r] * (dxhat[j] - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
                        }
                    }
                    out.push((x, Tensor::new(self.shape(x), dx)?));
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if self.needs(table) {
                    let shape = self.shape(table).to_vec();
                    let c = shape[1];
                    let mut dt = vec![S::ZERO; shape[0] * c];
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, &v) in dt[id * c..(id + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                            *acc += v;
                        }
                    }
                    out.push((table, Tensor::new(shape, dt)?));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                if self.needs(logits) {
                    let n = targets.len();
                    let v = probs.len() / n;
                    let scale = gd[0] / S::from_f64(n as f64);
                    let mut dl: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * v + t] -= scale;
                    }
                    out.push((logits, Tensor::new([n, v], dl)?));
                }
            }
            &Op::Sum { x } => {
                if self.needs(x) {
                    out.push((x, Tensor::full(self.shape(x), gd[0])));
                }
            }
            &Op::CausalSoftmax { x } => {
                if self.needs(x) {
                    let p = node.value.data();
                    let shape = node.value.shape();
                    let t = shape[shape.len() - 1];
                    let mut dx = vec![S::ZERO; p.len()];
                    for (r, (prow, grow)) in p.chunks_exact(t.max(1)).zip(gd.chunks_exact(t.max(1))).enumerate() {
                        let s: S = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for j in 0..t {
                            dx[r * t + j] = prow[j] * (grow[j] - s);
                        }
                    }
                    out.push((x, Tensor::new(shape, dx)?));
                }
            }
            &Op::SplitHeads { x, part, parts, layout } => {
                if self.needs(x) {
                    let HeadLayout {
                        batch,
                        heads,
                        seq,
                        head_dim: d,
                    } = layout;
                    let c = heads * d;
                    let cols = c * parts;
                    let mut dx = vec![S::ZERO; batch * seq * cols];
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..seq {
                                let s = (b * seq + t) * cols + part * c + h * d;
                                let o = ((b * heads + h) * seq + t) * d;
                                dx[s..s + d].copy_from_slice(&gd[o..o + d]);
                            }
                        }
                    }
                    out.push((x, Tensor::new(self.shape(x), dx)?));
                }
            }
            &Op::SliceHeads { x, start, src_heads } => {
                if self.needs(x) {
                    let l = head_layout(g.shape(), "slice_heads")?;
                    let block = l.seq * l.head_dim;
                    let mut dx = vec![S::ZERO; l.batch * src_heads * block];
                    for b in 0..l.batch {
                        let o = (b * src_heads + start) * block;
                        let s = b * l.heads * block;
                        dx[o..o + l.heads * block].copy_from_slice(&gd[s..s + l.heads * block]);
                    }
                    out.push((x, Tensor::new(self.shape(x), dx)?));
                }
            }
            &Op::ConcatHeads { a, b } => {
                let la = head_layout(self.shape(a), "concat_heads")?;
                let lb = head_layout(self.shape(b), "concat_heads")?;
                let block = la.seq * la.head_dim;
                let (na, nb) = (la.heads * block, lb.heads * block);
                let mut da = Vec::with_capacity(la.batch * na);
                let mut db = Vec::with_capacity(lb.batch * nb);
                for bi in 0..la.batch {
                    let base = bi * (na + nb);
                    da.extend_from_slice(&gd[base..base + na]);
                    db.extend_from_slice(&gd[base + na..base + na + nb]);
                }
                if self.needs(a) {
                    out.push((a, Tensor::new(self.shape(a), da)?));
                }
                if self.needs(b) {
                    out.push((b, Tensor::new(self.shape(b), db)?));
                }
            }
            &Op::MergeHeads { x, layout } => {
                if self.needs(x) {
                    let HeadLayout {
                        batch,
                        heads,
                        seq,
                        head_dim: d,
                    } = layout;
                    let cols = heads * d;
                    let mut dx = vec![S::ZERO; batch * heads * seq * d];
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..seq {
                                let s = ((b * heads + h) * seq + t) * d;
                                let o = (b * seq + t) * cols + h * d;
                                dx[s..s + d].copy_from_slice(&gd[o..o + d]);
                            }
                        }
                    }
                    out.push((x, Tensor::new(self.shape(x), dx)?));
                }
            }
            Op::Attention { q, k, v, probs } => {
                out.extend(self.attention_vjp(*q, *k, *v, probs, gd)?);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                if self.needs(x) {
                    let d = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    out.push((x, Tensor::new(self.shape(x), d)?));
                }
            }
            &Op::Reshape { x } => {
                if self.needs(x) {
                    out.push((x, g.clone().reshape(self.shape(x))?));
                }
            }
        }
        Ok(out)
    }

    fn attention_vjp(&self, q: Var, k: Var, v: Var, probs: &[S], go: &[S]) -> Result<Vec<(Var, Tensor<S>)>> {
        let shape = self.shape(q).to_vec();
        let (t, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let groups = go.len().checked_div(t * d).unwrap_or(0);
        let scale = S::from_f64(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let par = self.parallel && groups > 1;
        let mut out = Vec::with_capacity(3);

        if self.needs(v) {
            let mut dv = vec![S::ZERO; groups * t * d];
            for_chunks(par, &mut dv, t * d, |g, dvg| {
                let pg = &probs[g * t * t..(g + 1) * t * t];
                let gog = &go[g * t * d..(g + 1) * t * d];
                for i in 0..t {
                    let goi = &gog[i * d..(i + 1) * d];
                    for j in 0..=i {
                        axpy(pg[i * t + j], goi, &mut dvg[j * d..(j + 1) * d]);
                    }
                }
            });
            out.push((v, Tensor::new(shape.clone(), dv)?));
        }
        if !self.needs(q) && !self.needs(k) {
            return Ok(out);
        }
        // dS = P ⊙ (dP − rowsum(P ⊙ dP)) · scale, with dP = dO·Vᵀ
        let mut ds = vec![S::ZERO; groups * t * t];
        for_chunks(par, &mut ds, t * t, |g, dsg| {
            let pg = &probs[g * t * t..(g + 1) * t * t];
            let gog = &go[g * t * d..(g + 1) * t * d];
            let vg = &vd[g * t * d..(g + 1) * t * d];
            for i in 0..t {
                let goi = &gog[i * d..(i + 1) * d];
                let mut s = S::ZERO;
                for j in 0..=i {
                    let dp = dot(goi, &vg[j * d..(j + 1) * d]);
                    dsg[i * t + j] = dp;
                    s += pg[i * t + j] * dp;
                }
                for j in 0..=i {
                    dsg[i * t + j] = pg[i * t + j] * (dsg[i * t + j] - s) * scale;
                }
            }
        });
        if self.needs(q) {
            let mut dq = vec![S::ZERO; groups * t * d];
            for_chunks(par, &mut dq, t * d, |g, dqg| {
                let dsg = &ds[g * t * t..(g + 1) * t * t];
                let kg = &kd[g * t * d..(g + 1) * t * d];
                for i in 0..t {
                    let dqi = &mut dqg[i * d..(i + 1) * d];
                    for j in 0..=i {
                        axpy(dsg[i * t + j], &kg[j * d..(j + 1) * d], dqi);
                    }
                }
            });
            out.push((q, Tensor::new(shape.clone(), dq)?));
        }
        if self.needs(k) {
            let mut dk = vec![S::ZERO; groups * t * d];
            for_chunks(par, &mut dk, t * d, |g, dkg| {
                let dsg = &ds[g * t * t..(g + 1) * t * t];
                let qg = &qd[g * t * d..(g + 1) * t * d];
                for i in 0..t {
                    let qi = &qg[i * d..(i + 1) * d];
                    for j in 0..=i {
                        axpy(dsg[i * t + j], qi, &mut dkg[j * d..(j + 1) * d]);
                    }
                }
            });
            out.push((k, Tensor::new(shape, dk)?));
        }
        Ok(out)
    }
}
