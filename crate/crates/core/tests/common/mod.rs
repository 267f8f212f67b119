//! Test-only reference implementation: a plain GPT written with nested
//! `Vec<f64>` loops. It keeps every layer's keys and values in a list and
//! indexes it directly, so it shares no routing code with the library.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use skiplayer::model::{Gpt, ModelConfig};
use skiplayer::tensor::{Scalar, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub struct RefParams {
    map: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

impl RefParams {
    pub fn from_model<S: Scalar>(m: &Gpt<S>) -> Self {
        let map = m
            .layout()
            .into_iter()
            .zip(m.params())
            .map(|(spec, p)| (spec.name, (p.shape().to_vec(), p.to_f64_vec())))
            .collect();
        RefParams { map }
    }

    pub fn vec(&self, name: &str) -> &[f64] {
        &self.map[name].1
    }

    pub fn opt(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(|p| p.1.as_slice())
    }

    /// `[in, out]` row-major weight as rows of length `out`.
    pub fn mat(&self, name: &str) -> Mat {
        let (shape, data) = &self.map[name];
        data.chunks(shape[1]).map(<[f64]>::to_vec).collect()
    }
}

pub fn layer_norm(x: &Mat, g: &[f64], b: Option<&[f64]>) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b.map_or(0.0, |b| b[i]))
                .collect()
        })
        .collect()
}

pub fn linear(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    let out = w[0].len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| {
                    let mut s = b.map_or(0.0, |b| b[j]);
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w[i][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Causal softmax attention of one head; each operand is `[T][d]`.
pub fn attend(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    (0..q.len())
        .map(|t| {
            let scores: Vec<f64> = (0..=t)
                .map(|s| (0..d).map(|i| q[t][i] * k[s][i]).sum::<f64>() * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            (0..d)
                .map(|i| (0..=t).map(|s| w[s] / z * v[s][i]).sum())
                .collect()
        })
        .collect()
}

/// Columns `[from, from + d)` of `m`.
pub fn cols(m: &Mat, from: usize, d: usize) -> Mat {
    m.iter().map(|r| r[from..from + d].to_vec()).collect()
}

pub struct RefTrace {
    /// `[T][V]` over the logical vocabulary.
    pub logits: Mat,
    /// Per layer, per head: `[T][d]` attention output before projection.
    pub heads: Vec<Vec<Mat>>,
    /// Per layer, per head: keys and values as projected by that layer.
    pub keys: Vec<Vec<Mat>>,
    pub values: Vec<Vec<Mat>>,
    /// Per layer, per head: queries.
    pub queries: Vec<Vec<Mat>>,
}

/// One sequence through the reference model. Skip heads of layer `l` use
/// `keys[l - n_l]` / `values[l - n_l]` when `n_l >= 1`, `n_h >= 1` and
/// `l >= n_l`.
pub fn reference_forward(cfg: &ModelConfig, p: &RefParams, tokens: &[usize]) -> RefTrace {
    let (c, h) = (cfg.n_embd, cfg.n_head);
    let d = c / h;
    let wte = p.mat("wte");
    let wpe = p.mat("wpe");
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..c).map(|i| wte[id][i] + wpe[t][i]).collect())
        .collect();
    let mut trace = RefTrace {
        logits: Vec::new(),
        heads: Vec::new(),
        keys: Vec::new(),
        values: Vec::new(),
        queries: Vec::new(),
    };
    let first_skip = h - cfg.n_skip_head;
    for l in 0..cfg.n_layer {
        let pre = format!("h.{l}.");
        let n = |s: &str| format!("{pre}{s}");
        let a = layer_norm(&x, p.vec(&n("ln_1.weight")), p.opt(&n("ln_1.bias")));
        let qkv = linear(&a, &p.mat(&n("attn.c_attn.weight")), p.opt(&n("attn.c_attn.bias")));
        let qs: Vec<Mat> = (0..h).map(|j| cols(&qkv, j * d, d)).collect();
        let ks: Vec<Mat> = (0..h).map(|j| cols(&qkv, c + j * d, d)).collect();
        let vs: Vec<Mat> = (0..h).map(|j| cols(&qkv, 2 * c + j * d, d)).collect();
        let routed = cfg.n_skip_layer >= 1 && cfg.n_skip_head >= 1 && l >= cfg.n_skip_layer;
        let heads: Vec<Mat> = (0..h)
            .map(|j| {
                if routed && j >= first_skip {
                    let src = l - cfg.n_skip_layer;
                    attend(&qs[j], &trace.keys[src][j], &trace.values[src][j])
                } else {
                    attend(&qs[j], &ks[j], &vs[j])
                }
            })
            .collect();
        let merged: Mat = (0..tokens.len())
            .map(|t| heads.iter().flat_map(|hd| hd[t].iter().copied()).collect())
            .collect();
        let y = linear(&merged, &p.mat(&n("attn.c_proj.weight")), p.opt(&n("attn.c_proj.bias")));
        for (xr, yr) in x.iter_mut().zip(&y) {
            xr.iter_mut().zip(yr).for_each(|(a, b)| *a += b);
        }
        let m = layer_norm(&x, p.vec(&n("ln_2.weight")), p.opt(&n("ln_2.bias")));
        let f = linear(&m, &p.mat(&n("mlp.c_fc.weight")), p.opt(&n("mlp.c_fc.bias")));
        let f: Mat = f.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        let y = linear(&f, &p.mat(&n("mlp.c_proj.weight")), p.opt(&n("mlp.c_proj.bias")));
        for (xr, yr) in x.iter_mut().zip(&y) {
            xr.iter_mut().zip(yr).for_each(|(a, b)| *a += b);
        }
        trace.heads.push(heads);
        trace.keys.push(ks);
        trace.values.push(vs);
        trace.queries.push(qs);
    }
    let xf = layer_norm(&x, p.vec("ln_f.weight"), p.opt("ln_f.bias"));
    trace.logits = xf
        .iter()
        .map(|row| {
            (0..cfg.vocab_size)
                .map(|v| row.iter().zip(&wte[v]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    trace
}

/// Mean next-token cross-entropy of the reference model over one sequence.
pub fn reference_loss(cfg: &ModelConfig, p: &RefParams, tokens: &[usize], targets: &[usize]) -> f64 {
    let tr = reference_forward(cfg, p, tokens);
    let mut total = 0.0;
    for (row, &y) in tr.logits.iter().zip(targets) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        total += mx + z.ln() - row[y];
    }
    total / targets.len() as f64
}

/// A model from `seed` with extra N(0, `noise`) on every parameter, so that
/// norm gains and biases are not at their trivial initial values.
pub fn noisy_model<S: Scalar>(cfg: &ModelConfig, seed: u64, noise: f64) -> Gpt<S> {
    let base = Gpt::<f64>::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    let dist = Normal::new(0.0, noise).unwrap();
    let params = base
        .params()
        .iter()
        .map(|p| Tensor::from_fn(p.shape(), |i| S::from_f32((p.data()[i] + dist.sample(&mut rng)) as f32)))
        .collect();
    Gpt::from_params(cfg.clone(), params).unwrap()
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

pub fn cfg(n_layer: usize, n_head: usize, head_dim: usize, t: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layer,
        n_head,
        n_embd: n_head * head_dim,
        block_size: t,
        vocab_size: vocab,
        dropout: 0.0,
        n_skip_layer: 0,
        n_skip_head: 0,
        bias: true,
    }
}

/// Max |a - b| between model logits `[B, T, V]` for sequence `b` and a
/// reference `[T][V]`.
pub fn max_logit_diff<S: Scalar>(model: &Tensor<S>, b: usize, reference: &Mat) -> f64 {
    let (t, v) = (model.shape()[1], model.shape()[2]);
    let mut worst = 0.0f64;
    for i in 0..t {
        for j in 0..v {
            let m = model.data()[(b * t + i) * v + j].to_f64();
            worst = worst.max((m - reference[i][j]).abs());
        }
    }
    worst
}
