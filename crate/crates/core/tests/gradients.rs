mod common;

use common::{model_gradcheck, op_suite, tiny_config, GRAD_TOL};
use snipspot::model::AttentionScale;

#[test]
fn every_operation_matches_finite_differences() {
    for seed in 0..3 {
        for (name, err) in op_suite(seed) {
            assert!(err <= GRAD_TOL, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn full_model_matches_finite_differences() {
    let err = model_gradcheck(&tiny_config(), 11);
    assert!(err <= GRAD_TOL, "relative error {err:e}");
}

#[test]
fn global_attention_scale_gradients() {
    let cfg = snipspot::model::SpotterConfig {
        attention_scale: AttentionScale::Global,
        pyramid_blocks: 0,
        ..tiny_config()
    };
    let err = model_gradcheck(&cfg, 4);
    assert!(err <= GRAD_TOL, "relative error {err:e}");
}
