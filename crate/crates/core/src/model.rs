//! GPT-2-shaped decoder-only transformer whose attention sublayers are
//! skip-layer attention.
//!
//! Blocks are pre-norm: `x += attn(ln_1(x)); x += mlp(ln_2(x))`. Input and
//! output embeddings are tied, positions use a learned table and the MLP
//! expands to `4C` through tanh-GELU. Linear weights are stored `[in, out]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sla::{self, AttentionWeights, Dropout, KvWindow, SlaConfig};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const VOCAB_ALIGN: usize = 64;
const INIT_STD: f64 = 0.02;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub n_embd: usize,
    pub block_size: usize,
    /// Logical vocabulary; the embedding table is padded to [`VOCAB_ALIGN`].
    pub vocab_size: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub n_skip_layer: usize,
    #[serde(default)]
    pub n_skip_head: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
}

/// Three quarters of `n`, rounding a half down.
pub fn three_quarters(n: usize) -> usize {
    (3 * n) / 4
}

impl ModelConfig {
    /// Workstation-sized default: 6 layers, 6 heads, width 192, context 256,
    /// byte vocabulary, skip offsets at three quarters of depth and heads.
    pub fn desk_default() -> Self {
        ModelConfig {
            n_layer: 6,
            n_head: 6,
            n_embd: 192,
            block_size: 256,
            vocab_size: 256,
            dropout: 0.0,
            n_skip_layer: three_quarters(6),
            n_skip_head: three_quarters(6),
            bias: true,
        }
    }

    pub fn gpt2_small() -> Self {
        ModelConfig {
            n_layer: 12,
            n_head: 12,
            n_embd: 768,
            block_size: 1024,
            vocab_size: 50304,
            dropout: 0.0,
            n_skip_layer: 9,
            n_skip_head: 9,
            bias: true,
        }
    }

    /// Same shapes with skip-layer attention switched off.
    pub fn baseline(&self) -> Self {
        ModelConfig {
            n_skip_layer: 0,
            n_skip_head: 0,
            ..self.clone()
        }
    }

    pub fn with_skip(&self, n_skip_layer: usize, n_skip_head: usize) -> Self {
        ModelConfig {
            n_skip_layer,
            n_skip_head,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layer == 0 || self.n_head == 0 || self.n_embd == 0 {
            return fail("n_layer, n_head and n_embd must be positive".into());
        }
        if !self.n_embd.is_multiple_of(self.n_head) {
            return fail(format!(
                "n_embd ({}) must be divisible by n_head ({})",
                self.n_embd, self.n_head
            ));
        }
        if self.block_size == 0 || self.vocab_size == 0 {
            return fail("block_size and vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.n_skip_layer > self.n_layer - 1 {
            return fail(format!(
                "n_skip_layer ({}) must be at most n_layer - 1 ({})",
                self.n_skip_layer,
                self.n_layer - 1
            ));
        }
        if self.n_skip_head > self.n_head {
            return fail(format!(
                "n_skip_head ({}) must be at most n_head ({})",
                self.n_skip_head, self.n_head
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.n_embd / self.n_head
    }

    /// Embedding rows: `vocab_size` rounded up to a multiple of 64.
    pub fn padded_vocab(&self) -> usize {
        self.vocab_size.div_ceil(VOCAB_ALIGN) * VOCAB_ALIGN
    }

    pub fn sla(&self) -> SlaConfig {
        SlaConfig {
            n_head: self.n_head,
            head_dim: self.head_dim(),
            n_skip_layer: self.n_skip_layer,
            n_skip_head: self.n_skip_head,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.n_skip_layer == 0 || self.n_skip_head == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    /// Residual projections: std scaled by `1/sqrt(2L)`.
    ScaledNormal,
    Zeros,
    Ones,
}

/// Name, shape and treatment of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Receives decoupled weight decay (2-D non-embedding weights).
    pub decay: bool,
    init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], decay: bool, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            decay,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameter tensors in canonical order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.n_embd;
    let mut v = vec![
        ParamSpec::new("wte", &[cfg.padded_vocab(), c], false, Init::Normal),
        ParamSpec::new("wpe", &[cfg.block_size, c], false, Init::Normal),
    ];
    let norm = |v: &mut Vec<ParamSpec>, name: String| {
        v.push(ParamSpec::new(format!("{name}.weight"), &[c], false, Init::Ones));
        if cfg.bias {
            v.push(ParamSpec::new(format!("{name}.bias"), &[c], false, Init::Zeros));
        }
    };
    let linear = |v: &mut Vec<ParamSpec>, name: String, fan_in: usize, fan_out: usize, init: Init| {
        v.push(ParamSpec::new(format!("{name}.weight"), &[fan_in, fan_out], true, init));
        if cfg.bias {
            v.push(ParamSpec::new(format!("{name}.bias"), &[fan_out], false, Init::Zeros));
        }
    };
    for l in 0..cfg.n_layer {
        norm(&mut v, format!("h.{l}.ln_1"));
        linear(&mut v, format!("h.{l}.attn.c_attn"), c, 3 * c, Init::Normal);
        linear(&mut v, format!("h.{l}.attn.c_proj"), c, c, Init::ScaledNormal);
        norm(&mut v, format!("h.{l}.ln_2"));
        linear(&mut v, format!("h.{l}.mlp.c_fc"), c, 4 * c, Init::Normal);
        linear(&mut v, format!("h.{l}.mlp.c_proj"), 4 * c, c, Init::ScaledNormal);
    }
    norm(&mut v, "ln_f".into());
    v
}

/// Closed-form parameter count. Depends only on depth, width, vocabulary,
/// context length and the bias flag.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (c, l) = (cfg.n_embd, cfg.n_layer);
    let b = usize::from(cfg.bias);
    let per_layer = 2 * (c + b * c) // two layer norms
        + (c * 3 * c + b * 3 * c)   // qkv projection
        + (c * c + b * c)           // attention output projection
        + (c * 4 * c + b * 4 * c)   // mlp expansion
        + (4 * c * c + b * c); //     mlp projection
    cfg.padded_vocab() * c + cfg.block_size * c + l * per_layer + (c + b * c)
}

/// Tape handles for one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln_1: (Var, Option<Var>),
    pub attn: AttentionWeights,
    pub ln_2: (Var, Option<Var>),
    pub fc: (Var, Option<Var>),
    pub fc_proj: (Var, Option<Var>),
}

/// Tape handles for every parameter, plus the flat list in layout order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub all: Vec<Var>,
    pub wte: Var,
    pub wpe: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_f: (Var, Option<Var>),
}

impl ParamVars {
    /// Groups `all`, given in layout order, into named handles. Panics if
    /// `all` is shorter than the layout.
    pub fn from_flat(cfg: &ModelConfig, all: Vec<Var>) -> Self {
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("parameter layout exhausted");
        let wte = next();
        let wpe = next();
        let pair = |next: &mut dyn FnMut() -> Var| {
            let w = next();
            let b = if cfg.bias { Some(next()) } else { None };
            (w, b)
        };
        let mut blocks = Vec::with_capacity(cfg.n_layer);
        for _ in 0..cfg.n_layer {
            let ln_1 = pair(&mut next);
            let (qkv_w, qkv_b) = pair(&mut next);
            let (proj_w, proj_b) = pair(&mut next);
            let ln_2 = pair(&mut next);
            let fc = pair(&mut next);
            let fc_proj = pair(&mut next);
            blocks.push(BlockVars {
                ln_1,
                attn: AttentionWeights {
                    qkv_w,
                    qkv_b,
                    proj_w,
                    proj_b,
                },
                ln_2,
                fc,
                fc_proj,
            });
        }
        let ln_f = pair(&mut next);
        ParamVars {
            all,
            wte,
            wpe,
            blocks,
            ln_f,
        }
    }
}

/// What one forward pass recorded, beyond the logits.
pub struct ForwardTrace {
    /// `[B*T, vocab_size]`
    pub logits: Var,
    /// Per layer: attention head outputs before projection, `[B, h, T, d]`.
    pub heads: Vec<Var>,
    /// Per layer: the skip-head K/V slice it produced.
    pub produced: Vec<sla::KvSlice>,
    /// Per layer: residual stream entering the block, `[B*T, C]`.
    pub hidden: Vec<Var>,
    pub window_peak_len: usize,
    pub window_peak_elements: usize,
}

/// Loss and gradients for one batch, gradients in layout order.
pub struct LossGrad<S> {
    pub loss: f64,
    pub grads: Vec<Tensor<S>>,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gpt<S: Scalar = f32> {
    cfg: ModelConfig,
    params: Vec<Tensor<S>>,
}

impl<S: Scalar> Gpt<S> {
    /// Normal(0, 0.02) weights and embeddings, residual projections scaled
    /// by `1/sqrt(2L)`, zero biases, unit norm gains. Values are drawn in
    /// f32 so that f32 and f64 models from the same seed agree exactly.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0f64, INIT_STD / (2.0 * cfg.n_layer as f64).sqrt()).expect("valid std");
        let params = param_layout(&cfg)
            .into_iter()
            .map(|spec| match spec.init {
                Init::Normal => Tensor::from_fn(spec.shape, |_| S::from_f32(normal.sample(&mut rng) as f32)),
                Init::ScaledNormal => Tensor::from_fn(spec.shape, |_| S::from_f32(resid.sample(&mut rng) as f32)),
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::full(spec.shape, S::ONE),
            })
            .collect();
        Ok(Gpt { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<Tensor<S>>) -> Result<Self> {
        cfg.validate()?;
        let layout = param_layout(&cfg);
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (spec, p) in layout.iter().zip(&params) {
            if spec.shape != p.shape() {
                return Err(Error::dim("from_params", &spec.shape, p.shape()));
            }
        }
        Ok(Gpt { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        param_layout(&self.cfg)
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Gpt<T> {
        Gpt {
            cfg: self.cfg.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Index of the parameter called `name`.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.layout().iter().position(|s| s.name == name)
    }

    /// Copies every parameter onto `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape<S>, requires_grad: bool) -> ParamVars {
        let all = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect();
        ParamVars::from_flat(&self.cfg, all)
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::Contract(format!(
                "{} tokens cannot form {batch} equal sequences",
                tokens.len()
            )));
        }
        let t = tokens.len() / batch;
        if t > self.cfg.block_size {
            return Err(Error::Contract(format!(
                "sequence length {t} exceeds block size {}",
                self.cfg.block_size
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                limit: self.cfg.vocab_size,
            });
        }
        Ok(t)
    }

    /// Forward pass over `batch` sequences stacked in `tokens` (row-major
    /// `[B, T]`). Dropout is applied only when `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        pv: &ParamVars,
        tokens: &[usize],
        batch: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardTrace> {
        let t = self.check_tokens(tokens, batch)?;
        let cfg = &self.cfg;
        let sla_cfg = cfg.sla();
        let mut dropout = match rng {
            Some(rng) if cfg.dropout > 0.0 => Some(Dropout { p: cfg.dropout, rng }),
            _ => None,
        };

        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
        let tok = tape.embedding(pv.wte, tokens)?;
        let pos = tape.embedding(pv.wpe, &positions)?;
        let mut x = tape.add(tok, pos)?;
        if let Some(d) = dropout.as_mut() {
            x = tape.dropout(x, d.p, d.rng)?;
        }

        let mut window = KvWindow::new(cfg.n_skip_layer);
        let mut heads = Vec::with_capacity(cfg.n_layer);
        let mut produced = Vec::with_capacity(cfg.n_layer);
        let mut hidden = Vec::with_capacity(cfg.n_layer);
        for (l, blk) in pv.blocks.iter().enumerate() {
            hidden.push(x);
            let h = tape.layer_norm(x, blk.ln_1.0, blk.ln_1.1, LN_EPS)?;
            let out = sla::sla_forward(tape, h, batch, l, &window, &sla_cfg, &blk.attn, dropout.as_mut())?;
            x = tape.add(x, out.y)?;
            window.push(out.produced)?;
            heads.push(out.heads);
            produced.push(out.produced);

            let h = tape.layer_norm(x, blk.ln_2.0, blk.ln_2.1, LN_EPS)?;
            let h = sla::linear(tape, h, blk.fc.0, blk.fc.1)?;
            let h = tape.gelu(h)?;
            let mut h = sla::linear(tape, h, blk.fc_proj.0, blk.fc_proj.1)?;
            if let Some(d) = dropout.as_mut() {
                h = tape.dropout(h, d.p, d.rng)?;
            }
            x = tape.add(x, h)?;
        }
        let x = tape.layer_norm(x, pv.ln_f.0, pv.ln_f.1, LN_EPS)?;
        // Padding rows exist for alignment only and never reach the softmax.
        let head = if cfg.padded_vocab() == cfg.vocab_size {
            pv.wte
        } else {
            let rows: Vec<usize> = (0..cfg.vocab_size).collect();
            tape.embedding(pv.wte, &rows)?
        };
        let logits = tape.matmul_bt(x, head)?;
        Ok(ForwardTrace {
            logits,
            heads,
            produced,
            hidden,
            window_peak_len: window.peak_len(),
            window_peak_elements: window.peak_elements(),
        })
    }

    /// Eval-mode logits over the logical vocabulary, shape `[B, T, V]`.
    pub fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, false);
        let tr = self.forward(&mut tape, &pv, tokens, batch, None)?;
        let t = tokens.len() / batch;
        tape.value(tr.logits).clone().reshape([batch, t, self.cfg.vocab_size])
    }

    /// Eval-mode mean next-token cross-entropy.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize) -> Result<f64> {
        if inputs.len() != targets.len() {
            return Err(Error::dim("loss", &[inputs.len()], &[targets.len()]));
        }
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, false);
        let tr = self.forward(&mut tape, &pv, inputs, batch, None)?;
        let loss = tape.cross_entropy(tr.logits, targets)?;
        Ok(tape.value(loss).item()?.to_f64())
    }

    /// Training-mode loss and parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        rng: Option<&mut ChaCha8Rng>,
        parallel: bool,
    ) -> Result<LossGrad<S>> {
        if inputs.len() != targets.len() {
            return Err(Error::dim("loss", &[inputs.len()], &[targets.len()]));
        }
        let mut tape = Tape::new().with_parallel(parallel);
        let pv = self.register(&mut tape, true);
        let tr = self.forward(&mut tape, &pv, inputs, batch, rng)?;
        let loss = tape.cross_entropy(tr.logits, targets)?;
        let macs = tape.macs();
        let value = tape.value(loss).item()?.to_f64();
        tape.backward(loss)?;
        let grads = pv
            .all
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok(LossGrad {
            loss: value,
            grads,
            macs,
        })
    }

    /// Multiply-accumulates of one eval forward pass over `[batch, t]`.
    pub fn forward_macs(&self, batch: usize, t: usize) -> Result<u64> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, false);
        self.forward(&mut tape, &pv, &vec![0; batch * t], batch, None)?;
        Ok(tape.macs())
    }

    /// Autoregressive sampling. A temperature below `1e-6` decodes greedily;
    /// otherwise tokens are drawn from the temperature-scaled softmax,
    /// optionally restricted to the `top_k` largest logits.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_new: usize,
        temperature: f64,
        top_k: Option<usize>,
        seed: u64,
    ) -> Result<Vec<usize>> {
        if !(temperature > 0.0) {
            return Err(Error::Contract(format!("temperature must be > 0, got {temperature}")));
        }
        if prompt.is_empty() {
            return Err(Error::Contract("prompt must contain at least one token".into()));
        }
        if prompt.len() + max_new > self.cfg.block_size {
            return Err(Error::Contract(format!(
                "prompt ({}) + max_new ({max_new}) exceeds block size {}",
                prompt.len(),
                self.cfg.block_size
            )));
        }
        if top_k == Some(0) {
            return Err(Error::Contract("top_k must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            let logits = self.logits(&seq, 1)?;
            let v = logits.shape()[2];
            let last: Vec<f64> = logits.data()[(seq.len() - 1) * v..].iter().map(|x| x.to_f64()).collect();
            let next = if temperature < 1e-6 {
                argmax(&last)
            } else {
                sample(&last, temperature, top_k, &mut rng)
            };
            seq.push(next);
        }
        Ok(seq)
    }
}

/// Lowest index among the maxima.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], temperature: f64, top_k: Option<usize>, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Stable sort keeps lower indices first among ties, matching argmax.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    if let Some(k) = top_k {
        order.truncate(k.min(order.len()));
    }
    let mx = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - mx) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    order[order.len() - 1]
}
