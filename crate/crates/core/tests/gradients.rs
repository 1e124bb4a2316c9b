mod common;

use common::{grad_check_in, rng, worst_gradient_error, GRADIENT_ORACLES};
use rand::Rng;
use tritemp_core::params::{Init, ParamStore};
use tritemp_core::pointtemp::GlobalTemporalAggregation;
use tritemp_core::tensor::Tensor;

#[test]
fn analytic_gradients_match_central_differences() {
    for (name, f) in GRADIENT_ORACLES {
        let err = worst_gradient_error(f, 20);
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn global_temporal_aggregation_gradient() {
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let gta = GlobalTemporalAggregation::new(&mut store, &mut init, "gta", 8, 2, true);
        let mut r = rng(seed);
        let tokens = Tensor::new(&[4, 8], (0..32).map(|_| r.gen_range(-1.0..1.0)).collect());
        let xyz: Vec<[f64; 3]> = (0..4).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
        let frame = vec![0, 0, 1, 1];
        let w = Tensor::new(&[4, 8], (0..32).map(|_| r.gen_range(-1.0..1.0)).collect());
        let err = grad_check_in(&store, &[tokens], &move |g, v| {
            let (out, _) = gta.forward(g, v[0], &xyz, &frame);
            let wv = g.constant(w.clone());
            let m = g.mul(out, wv);
            g.sum(m)
        });
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}
