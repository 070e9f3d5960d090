//! Analytic gradients against central finite differences.

mod common;

use common::*;

#[test]
fn every_tape_operation_matches_finite_differences() {
    for seed in 0..20 {
        for (name, err) in op_instances(seed) {
            assert!(err < GRAD_TOL, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn composed_verifier_matches_finite_differences() {
    for seed in 0..20 {
        let err = verifier_instance(100 + seed, 40);
        assert!(err < GRAD_TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn checker_detects_a_wrong_gradient() {
    // A graph whose value depends on an input the tape never sees as a
    // dependency must fail the check.
    use ffdc::nn::Tensor2D;
    let x = [Tensor2D::from_vec(1, 1, vec![0.7])];
    let err = check_graph(&x, &|t, v| {
        let c = t.value(v[0]).get(0, 0);
        t.input(Tensor2D::from_vec(1, 1, vec![c * c]))
    });
    assert!(err > 0.5);
}
