//! Central finite differences against the tape's backward rules.

#[path = "common/gradsuite.rs"]
mod gradsuite;

use gradsuite::{objective_suite, op_suite};

const TOL: f64 = 1e-4;

#[test]
fn every_operation_on_randomized_shapes() {
    let (findings, shapes) = op_suite(24);
    assert!(shapes >= 10, "only {shapes} distinct shapes");
    for f in &findings {
        assert!(f.max_rel_err <= TOL, "{}: rel err {:.3e}", f.label, f.max_rel_err);
    }
}

#[test]
fn full_objective_through_encoder_and_head() {
    for f in objective_suite() {
        assert!(f.max_rel_err <= TOL, "{}: rel err {:.3e}", f.label, f.max_rel_err);
        assert!(f.dead * 10 <= f.tensors, "{}: {} of {} tensors get no gradient", f.label, f.dead, f.tensors);
    }
}
