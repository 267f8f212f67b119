mod common;

use common::cfg;
use skiplayer::model::{param_count, Gpt};

#[test]
fn params_and_macs_ignore_skip_settings() {
    for (l, h, d, v, t) in [(4, 4, 8, 64, 16), (6, 6, 4, 256, 12), (3, 2, 5, 50, 7)] {
        let base = cfg(l, h, d, t, v);
        let want_params = param_count(&base);
        let want_macs = Gpt::<f32>::new(base.clone(), 0).unwrap().forward_macs(2, t).unwrap();
        for nl in 0..l {
            for nh in 0..=h {
                let c = base.with_skip(nl, nh);
                let m = Gpt::<f32>::new(c.clone(), 0).unwrap();
                assert_eq!(param_count(&c), want_params);
                assert_eq!(m.param_count(), want_params);
                assert_eq!(m.forward_macs(2, t).unwrap(), want_macs, "L={l} ({nl},{nh})");
            }
        }
    }
}

#[test]
fn training_macs_ignore_skip_settings() {
    let base = cfg(4, 4, 4, 8, 32);
    let x: Vec<usize> = (0..16).map(|i| i % 32).collect();
    let counts: Vec<u64> = [(0, 0), (1, 1), (3, 4), (2, 2)]
        .iter()
        .map(|&(nl, nh)| {
            let m = Gpt::<f32>::new(base.with_skip(nl, nh), 0).unwrap();
            m.loss_and_grads(&x, &x, 2, None, false).unwrap().macs
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
}
