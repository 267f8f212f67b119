mod common;

use common::cfg;
use skiplayer::check::{model_grad_check, tiny_config, GRADCHECK_TOL};
use skiplayer::model::ModelConfig;
use skiplayer::tensor::OpKind;

fn worst(errors: &[(String, f64)]) -> f64 {
    errors.iter().map(|e| e.1).fold(0.0, f64::max)
}

#[test]
fn skip_config_passes() {
    let c = cfg(2, 4, 2, 8, 16).with_skip(1, 2);
    let errors = model_grad_check(&c, 0, 1e-4, None).unwrap();
    assert_eq!(errors.len(), skiplayer::model::param_layout(&c).len());
    assert!(worst(&errors) <= GRADCHECK_TOL, "{errors:?}");
}

#[test]
fn boundary_head_counts_pass() {
    for nh in [0, 4] {
        let c = cfg(2, 4, 2, 8, 16).with_skip(1, nh);
        let errors = model_grad_check(&c, 1, 1e-4, None).unwrap();
        assert!(worst(&errors) <= GRADCHECK_TOL, "n_h={nh}: {errors:?}");
    }
}

#[test]
fn no_bias_and_padded_vocab_pass() {
    let mut c = cfg(2, 2, 3, 6, 10).with_skip(1, 1);
    c.bias = false;
    let errors = model_grad_check(&c, 2, 1e-4, None).unwrap();
    assert!(worst(&errors) <= GRADCHECK_TOL, "{errors:?}");
}

#[test]
fn corrupted_backward_rules_are_caught() {
    let c = cfg(2, 4, 2, 8, 16).with_skip(1, 2);
    for name in ["gelu", "attention", "layer_norm", "matmul"] {
        let kind = OpKind::parse(name).unwrap();
        let errors = model_grad_check(&c, 0, 1e-4, Some(kind)).unwrap();
        assert!(worst(&errors) > 1e-2, "{name}: {}", worst(&errors));
    }
}

#[test]
fn tiny_config_of_desk_default_passes() {
    let errors = model_grad_check(&tiny_config(&ModelConfig::desk_default()), 0, 1e-4, None).unwrap();
    assert!(worst(&errors) <= GRADCHECK_TOL);
}
