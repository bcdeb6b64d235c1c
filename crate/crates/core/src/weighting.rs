//! Token reliability and importance: Monte-Carlo-dropout variance, synergy
//! (uniqueness × broadcast influence), and the importance mask that scales
//! value vectors in the refinement head.

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Real, RngStream, Tensor};
use crate::tokengraph::Partition;
use crate::vit::{BackboneConfig, ImageBatch, Vit};

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub variance: Vec<f64>,
    pub u_tilde: Vec<f64>,
    pub passes: usize,
}

impl UncertaintyReport {
    /// Report for `n` nodes with no measured uncertainty.
    pub fn zeros(n: usize) -> Self {
        UncertaintyReport {
            variance: vec![0.0; n],
            u_tilde: vec![0.0; n],
            passes: 0,
        }
    }

    /// Report from raw variances; scores are max-normalized, all zeros when
    /// every variance is zero.
    pub fn from_variance(variance: Vec<f64>, passes: usize) -> Self {
        let max = variance.iter().cloned().fold(0.0, f64::max);
        let u_tilde = if max > 0.0 {
            variance.iter().map(|v| v / max).collect()
        } else {
            vec![0.0; variance.len()]
        };
        UncertaintyReport {
            variance,
            u_tilde,
            passes,
        }
    }

    /// The first `n` nodes, renormalized among themselves.
    pub fn prefix(&self, n: usize) -> Self {
        Self::from_variance(self.variance[..n.min(self.variance.len())].to_vec(), self.passes)
    }
}

/// Per-node variance `(1/T) Σ_t ‖z_p⁽ᵗ⁾ − z̄_p‖²` across passes, and its
/// max-normalized score. All-zero variance yields all-zero scores.
pub fn uncertainty_from_passes<T: Real>(passes: &[Tensor<T>]) -> Result<UncertaintyReport> {
    let t = passes.len();
    if t < 2 {
        return Err(Error::param(format!("need at least 2 passes, got {t}")));
    }
    let shape = passes[0].shape().to_vec();
    if let Some(p) = passes.iter().find(|p| p.shape() != shape.as_slice()) {
        return Err(Error::dim("uncertainty", &shape, p.shape()));
    }
    let (n, d) = (passes[0].rows(), passes[0].cols());
    let mut mean = vec![0.0f64; n * d];
    for p in passes {
        for (m, v) in mean.iter_mut().zip(p.data()) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut variance = vec![0.0f64; n];
    for p in passes {
        for (i, var) in variance.iter_mut().enumerate() {
            let row = &p.data()[i * d..(i + 1) * d];
            let mu = &mean[i * d..(i + 1) * d];
            *var += row.iter().zip(mu).map(|(z, m)| (z.as_f64() - m).powi(2)).sum::<f64>();
        }
    }
    variance.iter_mut().for_each(|v| *v /= t as f64);
    Ok(UncertaintyReport::from_variance(variance, t))
}

/// Runs the encoder `passes` times with dropout at `rate` and measures the
/// variance of every token of every image. Nodes are ordered image-major,
/// token-minor, matching [`crate::fewshot`]'s graph layout.
pub fn mc_uncertainty<T: Real>(
    backbone: &BackboneConfig,
    params: &ParamStore<T>,
    images: &ImageBatch,
    passes: usize,
    rate: f64,
    rng: &RngStream,
) -> Result<UncertaintyReport> {
    if passes < 2 {
        return Err(Error::param(format!("MC dropout needs T >= 2, got {passes}")));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate must be in [0,1), got {rate}")));
    }
    let vit = Vit::new(BackboneConfig {
        dropout_rate: rate,
        ..backbone.clone()
    })?;
    let mut outs = Vec::with_capacity(passes);
    for t in 0..passes {
        let sets = vit.encode(params, images, None, &rng.fork(t as u64), rate > 0.0)?;
        let parts: Vec<&Tensor<T>> = sets.iter().map(|s| &s.tokens).collect();
        outs.push(Tensor::vstack(&parts)?);
    }
    uncertainty_from_passes(&outs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynergyReport {
    pub gamma: Vec<f64>,
    pub psi: Vec<f64>,
    pub eta: Vec<f64>,
}

fn max_normalize(v: &mut [f64]) {
    let max = v.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    }
}

/// Uniqueness `γ_p` is the attention mass column `p` receives in `A`;
/// broadcast influence `ψ_p` is the exp-affinity mass row `p` emits,
/// `Σ_{k≠p} exp(E_pk)`. Both are max-normalized and `η = γ ⊙ ψ`.
pub fn synergy(adjacency: &Tensor<f64>, affinity: &Tensor<f64>) -> Result<SynergyReport> {
    let n = adjacency.rows();
    if adjacency.shape() != [n, n] || affinity.shape() != [n, n] {
        return Err(Error::dim("synergy", adjacency.shape(), affinity.shape()));
    }
    if n == 1 {
        return Ok(SynergyReport {
            gamma: vec![1.0],
            psi: vec![1.0],
            eta: vec![1.0],
        });
    }
    let mut gamma = vec![0.0; n];
    for i in 0..n {
        for (j, g) in gamma.iter_mut().enumerate() {
            *g += adjacency.get2(i, j);
        }
    }
    max_normalize(&mut gamma);

    // log-domain row mass so dot-product affinities cannot overflow
    let log_mass: Vec<f64> = (0..n)
        .map(|p| {
            let row = affinity.row(p);
            let m = (0..n).filter(|&k| k != p).map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
            m + (0..n).filter(|&k| k != p).map(|k| (row[k] - m).exp()).sum::<f64>().ln()
        })
        .collect();
    let top = log_mass.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let psi: Vec<f64> = log_mass.iter().map(|l| (l - top).exp()).collect();
    let eta = gamma.iter().zip(&psi).map(|(g, p)| g * p).collect();
    Ok(SynergyReport { gamma, psi, eta })
}

/// How synergy and uncertainty combine into a node weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Combine {
    /// `η·(1 − ũ)`
    #[default]
    Product,
    /// `1 − ũ`
    Uncertainty,
    /// `η`
    Synergy,
}

impl Combine {
    pub fn apply(self, eta: f64, u: f64) -> f64 {
        match self {
            Combine::Product => eta * (1.0 - u),
            Combine::Uncertainty => 1.0 - u,
            Combine::Synergy => eta,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMask {
    /// Combined score per node, in `[0,1]`.
    pub weight: Vec<f64>,
    /// Retained nodes of each cluster, ascending node index.
    pub kept_local: Vec<Vec<usize>>,
    /// Retained cluster ids, ascending.
    pub kept_global: Vec<usize>,
}

impl ImportanceMask {
    /// No weighting and no pruning: every node weight 1, everything kept.
    pub fn uniform(p: &Partition) -> Self {
        ImportanceMask {
            weight: vec![1.0; p.len()],
            kept_local: p.members(),
            kept_global: (0..p.k()).collect(),
        }
    }

    pub fn is_kept(&self, node: usize, p: &Partition) -> bool {
        self.kept_local[p.cluster_of(node)].binary_search(&node).is_ok()
    }

    /// Multipliers for value rows: the node's weight when kept, else 0.
    pub fn value_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.weight.len()];
        for kept in &self.kept_local {
            for &i in kept {
                w[i] = self.weight[i];
            }
        }
        w
    }
}

/// Combines synergy and uncertainty per node, keeps the `k_local` best nodes
/// in each cluster and the `k_global` clusters with the highest mean kept
/// weight. Ties resolve to the lower node or cluster index.
pub fn build_mask(
    syn: &SynergyReport,
    unc: &UncertaintyReport,
    p: &Partition,
    k_local: usize,
    k_global: usize,
    rule: Combine,
) -> Result<ImportanceMask> {
    if k_local == 0 || k_global == 0 {
        return Err(Error::param("k_local and k_global must be at least 1"));
    }
    let n = p.len();
    if syn.eta.len() != n || unc.u_tilde.len() != n {
        return Err(Error::dim("build_mask", &[n], &[syn.eta.len(), unc.u_tilde.len()]));
    }
    let weight: Vec<f64> = syn
        .eta
        .iter()
        .zip(&unc.u_tilde)
        .map(|(&e, &u)| rule.apply(e, u).clamp(0.0, 1.0))
        .collect();
    let mut kept_local = Vec::with_capacity(p.k());
    let mut scores = Vec::with_capacity(p.k());
    for members in p.members() {
        let mut order = members.clone();
        order.sort_by(|&a, &b| weight[b].total_cmp(&weight[a]).then(a.cmp(&b)));
        order.truncate(k_local);
        order.sort_unstable();
        let mean = if order.is_empty() {
            0.0
        } else {
            order.iter().map(|&i| weight[i]).sum::<f64>() / order.len() as f64
        };
        scores.push(mean);
        kept_local.push(order);
    }
    let mut clusters: Vec<usize> = (0..p.k()).collect();
    clusters.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    clusters.truncate(k_global);
    clusters.sort_unstable();
    Ok(ImportanceMask {
        weight,
        kept_local,
        kept_global: clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pass_variance_closed_form() {
        let a = Tensor::<f64>::from_rows(&[vec![0.0]]);
        let b = Tensor::<f64>::from_rows(&[vec![2.0]]);
        let r = uncertainty_from_passes(&[a, b]).unwrap();
        assert_eq!(r.variance, vec![1.0]);
        assert_eq!(r.u_tilde, vec![1.0]);
    }

    #[test]
    fn zero_variance_guard() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let r = uncertainty_from_passes(&[a.clone(), a]).unwrap();
        assert_eq!(r.u_tilde, vec![0.0, 0.0]);
        let p = UncertaintyReport::from_variance(vec![1.0, 4.0, 8.0], 2).prefix(2);
        assert_eq!(p.u_tilde, vec![0.25, 1.0]);
        assert!(uncertainty_from_passes::<f64>(&[Tensor::zeros(&[1, 1])]).is_err());
    }

    #[test]
    fn uniform_graph_synergy_is_all_ones() {
        let n = 4;
        let mut a = Tensor::<f64>::full(&[n, n], 1.0 / 3.0);
        for i in 0..n {
            a.data_mut()[i * n + i] = 0.0;
        }
        let e = Tensor::<f64>::full(&[n, n], 0.3);
        let s = synergy(&a, &e).unwrap();
        for v in s.gamma.iter().chain(&s.psi).chain(&s.eta) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hub_column_gets_full_uniqueness() {
        // every other row sends all mass to node 0; node 0 splits evenly
        let a = Tensor::<f64>::from_rows(&[
            vec![0.0, 0.5, 0.5],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
        ]);
        let e = Tensor::<f64>::zeros(&[3, 3]);
        let s = synergy(&a, &e).unwrap();
        assert_eq!(s.gamma, vec![1.0, 0.25, 0.25]);
        for p in 0..3 {
            assert_eq!(s.eta[p], s.gamma[p] * s.psi[p]);
        }
    }

    #[test]
    fn single_node_synergy_defined() {
        let s = synergy(&Tensor::from_rows(&[vec![1.0]]), &Tensor::from_rows(&[vec![0.0]])).unwrap();
        assert_eq!(s.eta, vec![1.0]);
    }

    fn flat(n: usize, eta: f64, u: f64) -> (SynergyReport, UncertaintyReport) {
        (
            SynergyReport {
                gamma: vec![1.0; n],
                psi: vec![eta; n],
                eta: vec![eta; n],
            },
            UncertaintyReport {
                variance: vec![u; n],
                u_tilde: vec![u; n],
                passes: 2,
            },
        )
    }

    #[test]
    fn mask_tie_break_and_caps() {
        let (s, u) = flat(30, 1.0, 0.0);
        let p = Partition::new(vec![0; 30], 1).unwrap();
        let m = build_mask(&s, &u, &p, 20, 20, Combine::Product).unwrap();
        assert!(m.weight.iter().all(|&w| w == 1.0));
        assert_eq!(m.kept_local[0], (0..20).collect::<Vec<_>>());
        assert_eq!(m.kept_global, vec![0]);
        let vw = m.value_weights();
        assert_eq!(vw.iter().filter(|&&w| w > 0.0).count(), 20);
    }

    #[test]
    fn certain_uncertainty_zeroes_weight() {
        let (s, mut u) = flat(3, 0.7, 0.0);
        u.u_tilde[1] = 1.0;
        let p = Partition::new(vec![0, 0, 1], 2).unwrap();
        let m = build_mask(&s, &u, &p, 5, 5, Combine::Product).unwrap();
        assert_eq!(m.weight[1], 0.0);
        assert!(build_mask(&s, &u, &p, 0, 1, Combine::Product).is_err());
    }
}
