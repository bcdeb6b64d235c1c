#[path = "common/separation.rs"]
mod separation;

use separation::{brute_force, oracle_gap, single_class_rejected};

#[test]
fn matches_brute_force_on_random_sets() {
    let gap = oracle_gap(50, 11);
    assert!(gap <= 1e-9, "gap {gap:.3e}");
}

#[test]
fn hand_example() {
    let pts = vec![vec![0.0], vec![1.0], vec![3.0], vec![4.0]];
    assert!((brute_force(&pts, &[0, 0, 1, 1]) - 2.0 / 12.0).abs() < 1e-8);
}

#[test]
fn one_class_is_an_error() {
    assert!(single_class_rejected());
}
