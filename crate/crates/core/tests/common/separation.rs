//! Brute-force oracle for the class separation penalty.

use batr_core::fewshot::{separation_penalty, SEP_EPS};
use batr_core::numcore::{RngStream, Tensor};
use batr_core::Error;

/// Enumerates ordered pairs and halves the sums, so it shares no pair
/// bookkeeping with the library.
pub fn brute_force(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let (mut same, mut diff) = (0.0, 0.0);
    for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let mut s = 0.0;
            for k in 0..a.len() {
                s += (a[k] - b[k]) * (a[k] - b[k]);
            }
            if labels[i] == labels[j] {
                same += s.sqrt();
            } else {
                diff += s.sqrt();
            }
        }
    }
    (same / 2.0) / (diff / 2.0 + SEP_EPS)
}

/// Largest absolute gap between library and oracle over `sets` random
/// labelled embedding sets.
pub fn oracle_gap(sets: u64, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..sets {
        let mut rng = RngStream::new(seed, s);
        let n = 2 + rng.below(12);
        let d = 1 + rng.below(6);
        let classes = 2 + rng.below(4);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.uniform_in(-3.0, 3.0)).collect()).collect();
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let got = separation_penalty(&Tensor::new(vec![n, d], flat).unwrap(), &labels).unwrap();
        worst = worst.max((got - brute_force(&points, &labels)).abs());
    }
    worst
}

/// True when a single-class set is refused with a parameter error.
pub fn single_class_rejected() -> bool {
    let t = Tensor::<f64>::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    matches!(separation_penalty(&t, &[4, 4, 4]), Err(Error::Parameter(_)))
}
