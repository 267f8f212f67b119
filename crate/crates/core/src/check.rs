//! Finite-difference verification of whole-model gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::model::{Gpt, ModelConfig, ParamVars};
use crate::tensor::{grad_check_inputs, OpKind, Tensor};

pub const GRADCHECK_TOL: f64 = 1e-4;
const MAX_LAYERS: usize = 2;
const MAX_T: usize = 8;
const MAX_HEAD_DIM: usize = 4;
const MAX_VOCAB: usize = 16;

/// Shrinks `cfg` to something finite differences can cover in seconds:
/// at most 2 layers, context 8, head width 4 and 16 symbols. Head count
/// and skip settings are kept, with `n_skip_layer` clamped below the new
/// depth.
pub fn tiny_config(cfg: &ModelConfig) -> ModelConfig {
    let n_layer = cfg.n_layer.min(MAX_LAYERS);
    ModelConfig {
        n_layer,
        n_head: cfg.n_head,
        n_embd: cfg.n_head * cfg.head_dim().min(MAX_HEAD_DIM),
        block_size: cfg.block_size.min(MAX_T),
        vocab_size: cfg.vocab_size.min(MAX_VOCAB),
        dropout: 0.0,
        n_skip_layer: cfg.n_skip_layer.min(n_layer - 1),
        n_skip_head: cfg.n_skip_head,
        bias: cfg.bias,
    }
}

/// Max relative gradient error per named parameter tensor for the mean
/// cross-entropy on one random batch of 2 full-length sequences.
///
/// Weights start from the usual init plus N(0, 0.3) noise so that norm
/// gains, biases and attention scores are far from their trivial values.
/// `corrupt` sabotages one backward rule, for negative controls.
pub fn model_grad_check(
    cfg: &ModelConfig,
    seed: u64,
    eps: f64,
    corrupt: Option<OpKind>,
) -> Result<Vec<(String, f64)>> {
    let base = Gpt::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    let inputs: Vec<Tensor<f64>> = base
        .params()
        .iter()
        .map(|p| Tensor::from_fn(p.shape(), |i| p.data()[i] + noise.sample(&mut rng)))
        .collect();

    let (batch, t) = (2, cfg.block_size);
    let ids = Uniform::new(0, cfg.vocab_size).expect("non-empty vocab");
    let x: Vec<usize> = (0..batch * t).map(|_| ids.sample(&mut rng)).collect();
    let y: Vec<usize> = (0..batch * t).map(|_| ids.sample(&mut rng)).collect();

    let errors = grad_check_inputs(
        |tape, vars| {
            if let Some(kind) = corrupt {
                tape.corrupt_backward(kind);
            }
            let pv = ParamVars::from_flat(cfg, vars.to_vec());
            let tr = base.forward(tape, &pv, &x, batch, None)?;
            tape.cross_entropy(tr.logits, &y)
        },
        &inputs,
        eps,
    )?;
    Ok(base.layout().into_iter().map(|s| s.name).zip(errors).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_config_shrinks_desk_default() {
        let t = tiny_config(&ModelConfig::desk_default());
        assert_eq!((t.n_layer, t.n_head, t.n_embd, t.block_size, t.vocab_size), (2, 6, 24, 8, 16));
        assert_eq!((t.n_skip_layer, t.n_skip_head), (1, 4));
        t.validate().unwrap();
    }
}
