//! Exhaustive balanced-bisection oracle for small graphs.

use batr_core::numcore::{RngStream, Tensor};
use batr_core::tokengraph::{balance_cap, cut_weight_matrix, partition_weights};

/// Minimum cut over all bipartitions whose sides are nonempty and no larger
/// than the balance cap. Pairs are weighted by `(w_ij + w_ji)/2`.
pub fn exhaustive_min_cut(w: &Tensor<f64>, balance_factor: f64) -> f64 {
    let n = w.rows();
    let cap = balance_cap(n, 2, balance_factor);
    let mut best = f64::INFINITY;
    // node 0 fixed on side 0 to skip mirror images
    for mask in 0u32..(1 << (n - 1)) {
        let side: Vec<bool> = (0..n).map(|i| i > 0 && mask & (1 << (i - 1)) != 0).collect();
        let ones = side.iter().filter(|&&s| s).count();
        if ones == 0 || ones > cap || n - ones > cap {
            continue;
        }
        let mut cut = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                if side[i] != side[j] {
                    cut += 0.5 * (w.get2(i, j) + w.get2(j, i));
                }
            }
        }
        best = best.min(cut);
    }
    best
}

pub fn random_graph(rng: &mut RngStream, n: usize) -> Tensor<f64> {
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.uniform();
            w.data_mut()[i * n + j] = v;
            w.data_mut()[j * n + i] = v;
        }
    }
    w
}

#[derive(Clone, Debug)]
pub struct OracleStats {
    pub instances: usize,
    pub optimal: usize,
    pub worst_ratio: f64,
    /// Instances whose clusters were empty or over the balance cap.
    pub invariant_violations: usize,
}

/// Random graphs of 3 to 8 nodes, K = 2, compared with the exhaustive optimum.
pub fn small_graph_oracle(instances: usize, seed: u64, balance_factor: f64) -> OracleStats {
    let mut rng = RngStream::new(seed, 0);
    let mut s = OracleStats {
        instances,
        optimal: 0,
        worst_ratio: 1.0,
        invariant_violations: 0,
    };
    for inst in 0..instances {
        let n = 3 + inst % 6;
        let w = random_graph(&mut rng, n);
        let p = partition_weights(&w, 2, balance_factor).unwrap();
        let cap = balance_cap(n, 2, balance_factor);
        if p.len() != n || p.sizes().iter().any(|&z| z == 0 || z > cap) {
            s.invariant_violations += 1;
        }
        let got = cut_weight_matrix(&w, &p).unwrap();
        let best = exhaustive_min_cut(&w, balance_factor);
        let ratio = if best > 0.0 { got / best } else { 1.0 };
        s.worst_ratio = s.worst_ratio.max(ratio);
        if got <= best + 1e-9 {
            s.optimal += 1;
        }
    }
    s
}
