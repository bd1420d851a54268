mod common;

use common::{check_model, check_op, op_cases, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    for case in op_cases() {
        for seed in 0..20 {
            let err = check_op(&case, seed).unwrap();
            assert!(err <= TOLERANCE, "{} seed {seed}: relative error {err:.2e}", case.name);
        }
    }
}

#[test]
fn teacher_forced_loss_matches_finite_differences() {
    for seed in 0..20 {
        let err = check_model(seed, 3, 1e-2).unwrap();
        assert!(err <= TOLERANCE, "seed {seed}: relative error {err:.2e}");
    }
}
