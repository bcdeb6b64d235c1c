//! Refinement head: intra-cluster attention with cluster pooling,
//! inter-cluster attention, fusion, and one global propagation pass.

use crate::error::{Error, Result};
use crate::nn::{block, AttnOpts, BlockNames, Scale};
use crate::numcore::{Bound, ParamStore, Real, RngStream, Tape, Tensor, Var};
use crate::tokengraph::Partition;
use crate::weighting::ImportanceMask;

pub const PREFIX: &str = "head.";
const INTRA: &str = "head.intra";
const INTER: &str = "head.inter";
const PROP: &str = "head.prop";
const FUSE: &str = "head.fuse.w";

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub tau_init: f64,
    /// Scale of the residual branch outputs at init.
    pub branch_gain: f64,
}

impl HeadConfig {
    pub fn new(dim: usize) -> Self {
        HeadConfig {
            dim,
            heads: 1,
            ffn_mult: 2,
            tau_init: 0.1,
            branch_gain: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::param(format!(
                "head dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::param("ffn_mult must be at least 1"));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::param(format!("tau_init must be positive, got {}", self.tau_init)));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

fn tau_name(stage: &str) -> String {
    format!("{stage}.tau")
}

/// Inverse of softplus, so the stored raw value maps back to `tau`.
fn softplus_inv(tau: f64) -> f64 {
    tau + (-(-tau).exp_m1()).ln()
}

pub fn temperature(raw: f64) -> f64 {
    if raw > 30.0 {
        raw
    } else {
        raw.exp().ln_1p()
    }
}

/// Fresh head parameters, every name under [`PREFIX`].
pub fn init_params<T: Real>(cfg: &HeadConfig, rng: &mut RngStream) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut store = ParamStore::new();
    for stage in [INTRA, INTER, PROP] {
        BlockNames::new(stage, false).init(&mut store, d, d * cfg.ffn_mult, cfg.branch_gain, rng);
        store.insert(tau_name(stage), Tensor::full(&[1, 1], T::of(softplus_inv(cfg.tau_init))));
    }
    // identity on the token half plus a small mixing term from the summary
    let mut w = Tensor::<T>::zeros(&[2 * d, d]);
    let noise: Tensor<T> = crate::nn::xavier(rng, 2 * d, d, cfg.branch_gain);
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        let (r, c) = (i / d, i % d);
        let base = if r == c { 1.0 } else { 0.0 };
        *v = T::of(base + noise.data()[i].as_f64());
    }
    store.insert(FUSE, w);
    Ok(store)
}

/// Kept nodes of every cluster with their value multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterBatch {
    pub clusters: Vec<usize>,
    pub kept: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl ClusterBatch {
    pub fn new(p: &Partition, mask: &ImportanceMask) -> Result<Self> {
        if mask.kept_local.len() != p.k() || mask.weight.len() != p.len() {
            return Err(Error::dim("cluster batch", &[p.k(), p.len()], &[mask.kept_local.len(), mask.weight.len()]));
        }
        let mut seen = vec![false; p.len()];
        for (c, kept) in mask.kept_local.iter().enumerate() {
            assert!(!kept.is_empty(), "cluster {c} has no kept nodes");
            for &i in kept {
                assert!(i < p.len() && p.cluster_of(i) == c && !seen[i], "kept node {i} invalid for cluster {c}");
                seen[i] = true;
            }
        }
        Ok(ClusterBatch {
            clusters: (0..p.k()).collect(),
            kept: mask.kept_local.clone(),
            weights: mask
                .kept_local
                .iter()
                .map(|k| k.iter().map(|&i| mask.weight[i]).collect())
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// Which stages run. Disabled stages pass their input through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stages {
    pub bilevel: bool,
    pub propagate: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            bilevel: true,
            propagate: true,
        }
    }
}

fn learned_scale<T: Real>(tape: &mut Tape<T>, bound: &Bound, stage: &str, head_dim: usize) -> Result<Scale> {
    let tau = tape.softplus(bound.get(&tau_name(stage))?)?;
    let denom = tape.scale(tau, (head_dim as f64).sqrt())?;
    Ok(Scale::Learned(tape.recip(denom)?))
}

fn submask(keep: &[bool], n: usize, idx: &[usize]) -> Vec<bool> {
    let m = idx.len();
    let mut out = vec![false; m * m];
    for (a, &i) in idx.iter().enumerate() {
        let row = &mut out[a * m..(a + 1) * m];
        for (b, &j) in idx.iter().enumerate() {
            row[b] = keep[i * n + j];
        }
        if !row.iter().any(|&v| v) {
            row[a] = true;
        }
    }
    out
}

fn check_keep(keep: Option<&[bool]>, n: usize) -> Result<()> {
    match keep {
        Some(k) if k.len() != n * n => Err(Error::dim("pair mask", &[n, n], &[k.len()])),
        _ => Ok(()),
    }
}

pub struct IntraOutput {
    /// All nodes; pruned rows are copied from the input.
    pub tokens: Var,
    /// `K×D` mean of each cluster's attended rows.
    pub pooled: Var,
    /// One attention matrix per cluster (first head).
    pub maps: Vec<Var>,
}

/// Self-attention block inside every cluster over its kept nodes, value rows
/// scaled by the node weights, followed by mean pooling.
pub fn intra_cluster_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &HeadConfig,
    h0: Var,
    cb: &ClusterBatch,
    keep: Option<&[bool]>,
) -> Result<IntraOutput> {
    let [n, d] = tape.shape(h0);
    if d != cfg.dim {
        return Err(Error::dim("intra attention", &[n, cfg.dim], &[n, d]));
    }
    check_keep(keep, n)?;
    let names = BlockNames::new(INTRA, false);
    let scale = learned_scale(tape, bound, INTRA, cfg.head_dim())?;
    let mut parts = vec![h0];
    let mut pooled = Vec::with_capacity(cb.len());
    let mut maps = Vec::with_capacity(cb.len());
    let mut source: Vec<usize> = (0..n).collect();
    let mut offset = n;
    for (kept, weights) in cb.kept.iter().zip(&cb.weights) {
        assert!(!kept.is_empty(), "empty cluster reached intra attention");
        let x = tape.gather_rows(h0, kept)?;
        let sub = keep.map(|k| submask(k, n, kept));
        let vw: Vec<T> = weights.iter().map(|&w| T::of(w)).collect();
        let opts = AttnOpts {
            heads: cfg.heads,
            scale,
            keep: sub.as_deref(),
            value_weights: Some(&vw),
        };
        let (h1, m) = block(tape, bound, &names, x, &opts, None)?;
        for (r, &i) in kept.iter().enumerate() {
            source[i] = offset + r;
        }
        offset += kept.len();
        pooled.push(tape.mean_rows(h1)?);
        parts.push(h1);
        maps.push(m[0]);
    }
    let stacked = tape.concat_rows(&parts)?;
    let tokens = tape.gather_rows(stacked, &source)?;
    let pooled = tape.concat_rows(&pooled)?;
    Ok(IntraOutput { tokens, pooled, maps })
}

/// Attention block over the cluster summaries listed in `participants`;
/// the remaining rows are copied unchanged.
pub fn inter_cluster_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &HeadConfig,
    c: Var,
    participants: &[usize],
) -> Result<(Var, Var)> {
    let [k, d] = tape.shape(c);
    if d != cfg.dim {
        return Err(Error::dim("inter attention", &[k, cfg.dim], &[k, d]));
    }
    if participants.is_empty() || participants.iter().any(|&p| p >= k) {
        return Err(Error::param(format!("participants must be a nonempty subset of 0..{k}")));
    }
    let names = BlockNames::new(INTER, false);
    let scale = learned_scale(tape, bound, INTER, cfg.head_dim())?;
    let all = participants.len() == k && participants.iter().enumerate().all(|(i, &p)| i == p);
    let x = if all { c } else { tape.gather_rows(c, participants)? };
    let (y, maps) = block(tape, bound, &names, x, &AttnOpts::plain(cfg.heads, scale), None)?;
    if all {
        return Ok((y, maps[0]));
    }
    let mut source: Vec<usize> = (0..k).collect();
    for (r, &p) in participants.iter().enumerate() {
        source[p] = k + r;
    }
    let stacked = tape.concat_rows(&[c, y])?;
    Ok((tape.gather_rows(stacked, &source)?, maps[0]))
}

/// `[H¹ ‖ c′_{cluster(i)}] W_fuse` for every node `i`.
pub fn fuse<T: Real>(tape: &mut Tape<T>, w_fuse: Var, h1: Var, c_prime: Var, assignment: &[usize]) -> Result<Var> {
    let [n, d] = tape.shape(h1);
    let [k, dc] = tape.shape(c_prime);
    let [wr, wc] = tape.shape(w_fuse);
    if dc != d || wr != 2 * d || wc != d {
        return Err(Error::dim("fuse", &[2 * d, d], &[wr, wc]));
    }
    if assignment.len() != n || assignment.iter().any(|&a| a >= k) {
        return Err(Error::dim("fuse assignment", &[n], &[assignment.len()]));
    }
    let per_node = tape.gather_rows(c_prime, assignment)?;
    let cat = tape.concat_cols(&[h1, per_node])?;
    tape.matmul(cat, w_fuse)
}

/// One global attention block over every node.
pub fn graph_propagate<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &HeadConfig,
    h: Var,
    keep: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let [n, d] = tape.shape(h);
    if d != cfg.dim {
        return Err(Error::dim("propagation", &[n, cfg.dim], &[n, d]));
    }
    check_keep(keep, n)?;
    let names = BlockNames::new(PROP, false);
    let scale = learned_scale(tape, bound, PROP, cfg.head_dim())?;
    let opts = AttnOpts {
        heads: cfg.heads,
        scale,
        keep,
        value_weights: None,
    };
    let (y, maps) = block(tape, bound, &names, h, &opts, None)?;
    Ok((y, maps[0]))
}

pub struct Refined {
    pub nodes: Var,
    pub intra: Vec<Var>,
    pub inter: Option<Var>,
    pub propagation: Option<Var>,
}

/// Full head on node embeddings `h0` (`Nn×D`), output aligned row for row.
#[allow(clippy::too_many_arguments)]
pub fn refine<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &HeadConfig,
    h0: Var,
    partition: &Partition,
    mask: &ImportanceMask,
    keep: Option<&[bool]>,
    stages: Stages,
) -> Result<Refined> {
    let [n, _] = tape.shape(h0);
    if partition.len() != n {
        return Err(Error::dim("refine", &[n], &[partition.len()]));
    }
    let mut out = Refined {
        nodes: h0,
        intra: Vec::new(),
        inter: None,
        propagation: None,
    };
    if stages.bilevel {
        let cb = ClusterBatch::new(partition, mask)?;
        let intra = intra_cluster_attention(tape, bound, cfg, h0, &cb, keep)?;
        let (c_prime, inter_map) = inter_cluster_attention(tape, bound, cfg, intra.pooled, &mask.kept_global)?;
        out.nodes = fuse(tape, bound.get(FUSE)?, intra.tokens, c_prime, partition.assignment())?;
        out.intra = intra.maps;
        out.inter = Some(inter_map);
    }
    if stages.propagate {
        let (y, m) = graph_propagate(tape, bound, cfg, out.nodes, keep)?;
        out.nodes = y;
        out.propagation = Some(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck;

    fn setup(d: usize, seed: u64) -> (HeadConfig, ParamStore<f64>) {
        let cfg = HeadConfig::new(d);
        let mut rng = RngStream::new(seed, 0);
        let p = init_params(&cfg, &mut rng).unwrap();
        (cfg, p)
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        crate::nn::normal(&mut RngStream::new(seed, 9), &[n, d], 1.0)
    }

    fn rows_stochastic(t: &Tensor<f64>) -> bool {
        (0..t.rows()).all(|i| (t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6)
    }

    #[test]
    fn temperature_round_trip() {
        assert!((temperature(softplus_inv(0.1)) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn single_token_cluster_pools_itself() {
        let (cfg, p) = setup(4, 1);
        let part = Partition::new(vec![0, 1, 1], 2).unwrap();
        let mask = ImportanceMask::uniform(&part);
        let cb = ClusterBatch::new(&part, &mask).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false).unwrap();
        let h0 = tape.constant(random_tokens(3, 4, 2)).unwrap();
        let out = intra_cluster_attention(&mut tape, &b, &cfg, h0, &cb, None).unwrap();
        assert_eq!(tape.value(out.maps[0]).data(), &[1.0]);
        assert_eq!(tape.value(out.pooled).row(0), tape.value(out.tokens).row(0));
        assert!(out.maps.iter().all(|m| rows_stochastic(tape.value(*m))));
    }

    #[test]
    fn identical_tokens_identical_outputs() {
        let (cfg, p) = setup(4, 3);
        let row = random_tokens(1, 4, 4).row(0).to_vec();
        let h = Tensor::from_rows(&[row.clone(), row]);
        let part = Partition::new(vec![0, 0], 1).unwrap();
        let mask = ImportanceMask::uniform(&part);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false).unwrap();
        let h0 = tape.constant(h).unwrap();
        let r = refine(&mut tape, &b, &cfg, h0, &part, &mask, None, Stages::default()).unwrap();
        let y = tape.value(r.nodes);
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn inter_single_cluster_and_symmetry() {
        let (cfg, p) = setup(4, 5);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false).unwrap();
        let c = tape.constant(random_tokens(1, 4, 6)).unwrap();
        let (_, m) = inter_cluster_attention(&mut tape, &b, &cfg, c, &[0]).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0]);

        let row = random_tokens(1, 4, 7).row(0).to_vec();
        let same = tape.constant(Tensor::from_rows(&[row.clone(), row.clone(), row])).unwrap();
        let (y, _) = inter_cluster_attention(&mut tape, &b, &cfg, same, &[0, 1, 2]).unwrap();
        let y = tape.value(y);
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(y.row(1), y.row(2));
    }

    #[test]
    fn inter_permutation_equivariant_and_copies_rest() {
        let (cfg, p) = setup(4, 8);
        let c = random_tokens(4, 4, 9);
        let perm = [2, 0, 3, 1];
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false).unwrap();
        let cv = tape.constant(c.clone()).unwrap();
        let cp = tape.constant(c.select_rows(&perm)).unwrap();
        let (y, _) = inter_cluster_attention(&mut tape, &b, &cfg, cv, &[0, 1, 2, 3]).unwrap();
        let (yp, _) = inter_cluster_attention(&mut tape, &b, &cfg, cp, &[0, 1, 2, 3]).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for (a, b) in tape.value(yp).row(i).iter().zip(tape.value(y).row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let (part, _) = inter_cluster_attention(&mut tape, &b, &cfg, cv, &[1, 3]).unwrap();
        assert_eq!(tape.value(part).row(0), c.row(0));
        assert_eq!(tape.value(part).row(2), c.row(2));
        assert_ne!(tape.value(part).row(1), c.row(1));
    }

    #[test]
    fn fuse_identity_and_selector_blocks() {
        let d = 3;
        let h1 = random_tokens(4, d, 10);
        let c = random_tokens(2, d, 11);
        let assign = [0, 1, 1, 0];
        let mut top = Tensor::<f64>::zeros(&[2 * d, d]);
        let mut bottom = Tensor::<f64>::zeros(&[2 * d, d]);
        for i in 0..d {
            top.data_mut()[i * d + i] = 1.0;
            bottom.data_mut()[(d + i) * d + i] = 1.0;
        }
        let mut tape = Tape::new();
        let hv = tape.constant(h1.clone()).unwrap();
        let cv = tape.constant(c.clone()).unwrap();
        let wt = tape.constant(top).unwrap();
        let wb = tape.constant(bottom).unwrap();
        let a = fuse(&mut tape, wt, hv, cv, &assign).unwrap();
        assert_eq!(tape.value(a).data(), h1.data());
        let s = fuse(&mut tape, wb, hv, cv, &assign).unwrap();
        for (i, &k) in assign.iter().enumerate() {
            assert_eq!(tape.value(s).row(i), c.row(k));
        }
        let bad = tape.constant(Tensor::zeros(&[d, d])).unwrap();
        assert!(matches!(fuse(&mut tape, bad, hv, cv, &assign), Err(Error::Dimension { .. })));
    }

    #[test]
    fn propagation_rows_stochastic_and_duplicates() {
        let (cfg, p) = setup(4, 12);
        let mut h = random_tokens(5, 4, 13);
        let r0 = h.row(0).to_vec();
        h.data_mut()[4 * 4..].copy_from_slice(&r0);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false).unwrap();
        h.data_mut().iter_mut().for_each(|v| *v *= 1e3);
        let hv = tape.constant(h).unwrap();
        let (y, m) = graph_propagate(&mut tape, &b, &cfg, hv, None).unwrap();
        assert!(rows_stochastic(tape.value(m)));
        assert_eq!(tape.value(y).row(0), tape.value(y).row(4));
        let one = tape.constant(random_tokens(1, 4, 14)).unwrap();
        let (_, m1) = graph_propagate(&mut tape, &b, &cfg, one, None).unwrap();
        assert_eq!(tape.value(m1).data(), &[1.0]);
    }

    #[test]
    fn intra_equivariant_within_cluster() {
        let (cfg, p) = setup(4, 15);
        let h = random_tokens(4, 4, 16);
        let part = Partition::new(vec![0; 4], 1).unwrap();
        let mask = ImportanceMask::uniform(&part);
        let cb = ClusterBatch::new(&part, &mask).unwrap();
        let perm = [3, 1, 0, 2];
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false).unwrap();
        let a = tape.constant(h.clone()).unwrap();
        let ap = tape.constant(h.select_rows(&perm)).unwrap();
        let y = intra_cluster_attention(&mut tape, &b, &cfg, a, &cb, None).unwrap().tokens;
        let yp = intra_cluster_attention(&mut tape, &b, &cfg, ap, &cb, None).unwrap().tokens;
        for (i, &src) in perm.iter().enumerate() {
            for (u, v) in tape.value(yp).row(i).iter().zip(tape.value(y).row(src)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pruned_nodes_pass_through_intra() {
        let (cfg, p) = setup(4, 17);
        let h = random_tokens(4, 4, 18);
        let part = Partition::new(vec![0, 0, 1, 1], 2).unwrap();
        let mut mask = ImportanceMask::uniform(&part);
        mask.kept_local = vec![vec![0], vec![3]];
        let cb = ClusterBatch::new(&part, &mask).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false).unwrap();
        let hv = tape.constant(h.clone()).unwrap();
        let out = intra_cluster_attention(&mut tape, &b, &cfg, hv, &cb, None).unwrap();
        assert_eq!(tape.value(out.tokens).row(1), h.row(1));
        assert_eq!(tape.value(out.tokens).row(2), h.row(2));
        assert_ne!(tape.value(out.tokens).row(0), h.row(0));
    }

    fn toy_episode() -> (Partition, ImportanceMask, Vec<bool>) {
        let part = Partition::new(vec![0, 0, 1, 1, 1, 0], 2).unwrap();
        let mask = ImportanceMask {
            weight: vec![0.9, 0.4, 1.0, 0.7, 0.2, 0.6],
            kept_local: vec![vec![0, 1, 5], vec![2, 3, 4]],
            kept_global: vec![0, 1],
        };
        let mut keep = vec![true; 36];
        keep[1] = false; // node 0 may not see node 1
        keep[6] = false;
        (part, mask, keep)
    }

    #[test]
    fn refine_gradients_match_finite_differences() {
        let (cfg, mut p) = setup(4, 19);
        p.insert("x", random_tokens(6, 4, 20));
        let (part, mask, keep) = toy_episode();
        let reports = gradcheck::check(&p, gradcheck::DEFAULT_STEP, |tape, b| {
            let r = refine(tape, b, &cfg, b.get("x")?, &part, &mask, Some(&keep), Stages::default())?;
            let sq = tape.square(r.nodes)?;
            let s = tape.sum(r.nodes)?;
            let q = tape.sum(sq)?;
            let q = tape.scale(q, 0.1)?;
            tape.add(s, q)
        })
        .unwrap();
        for r in &reports {
            assert!(r.max_rel_err <= 1e-4, "{}: rel err {}", r.name, r.max_rel_err);
            assert!(r.max_abs_grad > 1e-12, "{} has no gradient", r.name);
        }
    }

    #[test]
    fn degenerate_single_cluster_and_determinism() {
        let (cfg, p) = setup(4, 21);
        let h = random_tokens(5, 4, 22);
        let part = Partition::new(vec![0; 5], 1).unwrap();
        let mask = ImportanceMask::uniform(&part);
        let run = || {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, |_| false).unwrap();
            let hv = tape.constant(h.clone()).unwrap();
            let r = refine(&mut tape, &b, &cfg, hv, &part, &mask, None, Stages::default()).unwrap();
            assert_eq!(tape.shape(r.nodes), [5, 4]);
            assert_eq!(r.intra.len(), 1);
            assert!(rows_stochastic(tape.value(r.propagation.unwrap())));
            tape.value(r.nodes).clone()
        };
        assert_eq!(run(), run());
    }
}
