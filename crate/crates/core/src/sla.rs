//! Skip-layer attention.
//!
//! Each layer splits its `h` heads at `split_num = h - n_h`. Heads
//! `[0, split_num)` attend over the layer's own keys and values. When the
//! layer is active (`n_l >= 1`, `n_h >= 1`, `l >= n_l`), heads
//! `[split_num, h)` keep their own queries but attend over the skip-head
//! keys and values produced by layer `l - n_l`. Every layer hands its own
//! skip-head K/V slice downstream through a [`KvWindow`] that retains only
//! the last `n_l` slices.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Number of local heads: `h - n_h`.
pub fn head_split(n_head: usize, n_skip_head: usize) -> Result<usize> {
    n_head.checked_sub(n_skip_head).ok_or_else(|| {
        Error::Config(format!(
            "n_skip_head ({n_skip_head}) exceeds n_head ({n_head})"
        ))
    })
}

/// Whether layer `layer` (0-based) routes its skip heads to an earlier layer.
pub fn skip_active(layer: usize, n_skip_layer: usize, n_skip_head: usize) -> bool {
    n_skip_layer >= 1 && n_skip_head >= 1 && layer >= n_skip_layer
}

/// The layer whose skip-head K/V an active layer consumes.
pub fn skip_source(layer: usize, n_skip_layer: usize) -> Result<usize> {
    if n_skip_layer == 0 || layer < n_skip_layer {
        return Err(Error::Contract(format!(
            "layer {layer} has no skip source with n_skip_layer = {n_skip_layer}"
        )));
    }
    Ok(layer - n_skip_layer)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlaConfig {
    pub n_head: usize,
    pub head_dim: usize,
    pub n_skip_layer: usize,
    pub n_skip_head: usize,
}

impl SlaConfig {
    pub fn new(n_head: usize, head_dim: usize, n_skip_layer: usize, n_skip_head: usize) -> Result<Self> {
        if n_head == 0 || head_dim == 0 {
            return Err(Error::Config("n_head and head_dim must be positive".into()));
        }
        head_split(n_head, n_skip_head)?;
        Ok(SlaConfig {
            n_head,
            head_dim,
            n_skip_layer,
            n_skip_head,
        })
    }

    pub fn n_embd(&self) -> usize {
        self.n_head * self.head_dim
    }

    pub fn split_num(&self) -> usize {
        self.n_head - self.n_skip_head
    }

    pub fn is_active(&self, layer: usize) -> bool {
        skip_active(layer, self.n_skip_layer, self.n_skip_head)
    }

    pub fn source(&self, layer: usize) -> Result<usize> {
        if !self.is_active(layer) {
            return Err(Error::Contract(format!("layer {layer} is not a skip layer")));
        }
        skip_source(layer, self.n_skip_layer)
    }
}

/// Skip-head keys and values produced by one layer, each `[B, n_h, T, d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KvSlice {
    pub keys: Var,
    pub values: Var,
    pub source_layer: usize,
    /// Elements held by `keys` and `values` together.
    pub elements: usize,
}

impl KvSlice {
    pub fn new<S: Scalar>(tape: &Tape<S>, keys: Var, values: Var, source_layer: usize) -> Result<Self> {
        if tape.shape(keys) != tape.shape(values) {
            return Err(Error::dim("kv_slice", tape.shape(keys), tape.shape(values)));
        }
        Ok(KvSlice {
            keys,
            values,
            source_layer,
            elements: tape.value(keys).numel() + tape.value(values).numel(),
        })
    }

    pub fn heads<S: Scalar>(&self, tape: &Tape<S>) -> usize {
        tape.shape(self.keys)[1]
    }
}

/// Bounded FIFO of the most recent [`KvSlice`]s, oldest first.
#[derive(Clone, Debug)]
pub struct KvWindow {
    slices: VecDeque<KvSlice>,
    capacity: usize,
    peak_len: usize,
    peak_elements: usize,
}

impl KvWindow {
    /// A window for `n_skip_layer`; holds at most `max(n_skip_layer, 1)` slices.
    pub fn new(n_skip_layer: usize) -> Self {
        let capacity = n_skip_layer.max(1);
        KvWindow {
            slices: VecDeque::with_capacity(capacity),
            capacity,
            peak_len: 0,
            peak_elements: 0,
        }
    }

    pub fn push(&mut self, slice: KvSlice) -> Result<()> {
        if let Some(last) = self.slices.back() {
            if slice.source_layer <= last.source_layer {
                return Err(Error::Contract(format!(
                    "kv window push out of order: layer {} after layer {}",
                    slice.source_layer, last.source_layer
                )));
            }
        }
        if self.slices.len() == self.capacity {
            self.slices.pop_front();
        }
        self.slices.push_back(slice);
        self.peak_len = self.peak_len.max(self.slices.len());
        self.peak_elements = self.peak_elements.max(self.elements());
        Ok(())
    }

    pub fn get(&self, source_layer: usize) -> Option<&KvSlice> {
        self.slices.iter().find(|s| s.source_layer == source_layer)
    }

    pub fn oldest(&self) -> Option<&KvSlice> {
        self.slices.front()
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slices.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn layers(&self) -> Vec<usize> {
        self.slices.iter().map(|s| s.source_layer).collect()
    }

    /// Elements currently retained across all slices.
    pub fn elements(&self) -> usize {
        self.slices.iter().map(|s| s.elements).sum()
    }

    pub fn peak_len(&self) -> usize {
        self.peak_len
    }

    pub fn peak_elements(&self) -> usize {
        self.peak_elements
    }
}

/// Tape handles for one attention sublayer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    /// `[C, 3C]`, columns ordered Q | K | V.
    pub qkv_w: Var,
    pub qkv_b: Option<Var>,
    /// `[C, C]`
    pub proj_w: Var,
    pub proj_b: Option<Var>,
}

/// Dropout probability plus the generator that draws its masks.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

pub struct SlaOutput {
    /// Sublayer output `[B*T, C]` after projection and dropout.
    pub y: Var,
    /// Per-head attention outputs before projection, `[B, h, T, d]`.
    pub heads: Var,
    /// Queries, keys and values as projected by this layer, `[B, h, T, d]`.
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// This layer's own skip-head K/V, for consumption `n_l` layers later.
    pub produced: KvSlice,
}

pub(crate) fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// One skip-layer attention sublayer.
///
/// `x` is `[B*T, C]` with `batch` sequences stacked row-wise. `window` must
/// hold the slices of every layer below `layer` still needed, in order.
#[allow(clippy::too_many_arguments)]
pub fn sla_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    batch: usize,
    layer: usize,
    window: &KvWindow,
    cfg: &SlaConfig,
    weights: &AttentionWeights,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<SlaOutput> {
    let c = cfg.n_embd();
    match *tape.shape(x) {
        [rows, cols] if cols == c && batch > 0 && rows % batch == 0 => {}
        ref s => return Err(Error::dim("sla_forward", s, &[batch, c])),
    }
    let h = cfg.n_head;
    let split = cfg.split_num();

    let qkv = linear(tape, x, weights.qkv_w, weights.qkv_b)?;
    let q = tape.split_heads(qkv, batch, h, 0, 3)?;
    let k = tape.split_heads(qkv, batch, h, 1, 3)?;
    let v = tape.split_heads(qkv, batch, h, 2, 3)?;

    let (k_att, v_att) = if cfg.is_active(layer) {
        let src_layer = cfg.source(layer)?;
        let src = window.get(src_layer).ok_or_else(|| {
            Error::State(format!(
                "layer {layer} needs skip K/V from layer {src_layer}, window holds {:?}",
                window.layers()
            ))
        })?;
        if src.heads(tape) != cfg.n_skip_head {
            return Err(Error::dim("sla_forward", tape.shape(src.keys), &[batch, cfg.n_skip_head]));
        }
        let k_local = tape.slice_heads(k, 0, split)?;
        let v_local = tape.slice_heads(v, 0, split)?;
        (
            tape.concat_heads(k_local, src.keys)?,
            tape.concat_heads(v_local, src.values)?,
        )
    } else {
        (k, v)
    };

    let heads = tape.attention(q, k_att, v_att)?;
    let merged = tape.merge_heads(heads)?;
    let mut y = linear(tape, merged, weights.proj_w, weights.proj_b)?;
    if let Some(d) = dropout {
        y = tape.dropout(y, d.p, d.rng)?;
    }

    let k_skip = tape.slice_heads(k, split, h)?;
    let v_skip = tape.slice_heads(v, split, h)?;
    let produced = KvSlice::new(tape, k_skip, v_skip, layer)?;
    Ok(SlaOutput {
        y,
        heads,
        q,
        k,
        v,
        produced,
    })
}

/// `causal_softmax(q·kᵀ/√d)·v` for a single head, each operand `[T, d]`.
pub fn per_head_attention<S: Scalar>(tape: &mut Tape<S>, q: Var, k: Var, v: Var) -> Result<Var> {
    for other in [k, v] {
        if tape.shape(q) != tape.shape(other) || tape.shape(q).len() != 2 {
            return Err(Error::dim("per_head_attention", tape.shape(q), tape.shape(other)));
        }
    }
    tape.attention(q, k, v)
}
