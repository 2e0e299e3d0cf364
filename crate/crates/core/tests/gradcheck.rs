//! Finite-difference checks of every differentiable op and of a whole model.

mod common;

use common::*;

#[test]
fn every_op_matches_central_differences() {
    let results = gradcheck_all_ops(17);
    assert_eq!(results.len(), 16);
    for (op, configs, worst) in results {
        assert_eq!(configs, CONFIGS_PER_OP);
        assert!(worst <= FD_REL_TOL, "{op}: {worst:e}");
    }
}

#[test]
fn cooperative_model_gradients() {
    let (worst, checked, skipped) = gradcheck_model(3, false);
    assert!(worst <= FD_REL_TOL, "{worst:e}");
    assert!(
        checked > 10 * skipped.max(1),
        "{checked} checked, {skipped} skipped"
    );
}

#[test]
fn adversarial_model_gradients() {
    let (worst, checked, skipped) = gradcheck_model(4, true);
    assert!(worst <= FD_REL_TOL, "{worst:e}");
    assert!(
        checked > 10 * skipped.max(1),
        "{checked} checked, {skipped} skipped"
    );
}
