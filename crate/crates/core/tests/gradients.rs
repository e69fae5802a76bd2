mod common;

use common::grad::{check_detection_loss, check_grad_consistency, check_op, INSTANCES, TOLERANCE};
use wdfq::ops::REGISTERED;

#[test]
fn every_registered_kernel_matches_central_differences() {
    let mut failures = Vec::new();
    for (i, name) in REGISTERED.iter().enumerate() {
        let worst = check_op(name, INSTANCES, 1000 + i as u64);
        if worst.is_nan() || worst > TOLERANCE {
            failures.push(format!("{name}: {worst:e}"));
        }
    }
    assert!(failures.is_empty(), "kernels over tolerance: {failures:?}");
}

#[test]
fn gradient_consistency_loss_matches_central_differences() {
    let worst = check_grad_consistency(INSTANCES, 7);
    assert!(worst <= TOLERANCE, "worst relative error {worst:e}");
}

#[test]
fn detection_loss_matches_central_differences() {
    let worst = check_detection_loss(INSTANCES, 11);
    assert!(worst <= TOLERANCE, "worst relative error {worst:e}");
}

#[test]
fn module_level_checks_pass() {
    for m in wdfq::pipeline::gradcheck::MODULES {
        let r = wdfq::pipeline::gradcheck::check_module(m, 5).unwrap();
        assert!(r.checked > 0);
        assert!(r.max_rel_error <= TOLERANCE, "{m}: {:e}", r.max_rel_error);
    }
}
