//! Token graph over episode embeddings, row-normalized affinities, top-k
//! sparsification, and balanced K-way partitioning.
//!
//! Partitioning is recursive bisection: each split is seeded by greedy
//! region growing and then improved with Kernighan–Lin style passes of
//! single-vertex moves (the Fiduccia–Mattheyses form) under a size window
//! that keeps every leaf cluster within the balance cap.

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Support,
    Query,
}

/// Where a graph node came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeMeta {
    pub image_id: usize,
    pub view_id: usize,
    pub token_index: usize,
    pub role: Role,
    pub label: Option<usize>,
}

impl NodeMeta {
    pub fn is_class_token(&self) -> bool {
        self.token_index == 0
    }
}

/// Which node pairs are excluded from attention, in addition to any rule a
/// stage applies itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PairMask {
    /// Tokens may not attend to a different view of the same image.
    #[default]
    SameImage,
    None,
    /// Tokens may not attend to themselves.
    Diagonal,
}

impl PairMask {
    pub fn allows(self, i: usize, a: &NodeMeta, j: usize, b: &NodeMeta) -> bool {
        match self {
            PairMask::None => true,
            PairMask::Diagonal => i != j,
            PairMask::SameImage => !(a.image_id == b.image_id && a.view_id != b.view_id),
        }
    }

    /// Row-major admissibility matrix over `nodes`. Rows left without any
    /// admissible entry fall back to attending to themselves.
    pub fn matrix(self, nodes: &[NodeMeta]) -> Vec<bool> {
        let n = nodes.len();
        let mut keep = vec![false; n * n];
        for i in 0..n {
            let row = &mut keep[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] = self.allows(i, &nodes[i], j, &nodes[j]);
            }
            if !row.iter().any(|&b| b) {
                row[i] = true;
            }
        }
        keep
    }
}

#[derive(Clone, Debug)]
pub struct TokenGraph<T: Real = f32> {
    embeddings: Tensor<T>,
    meta: Vec<NodeMeta>,
    affinity: Tensor<f64>,
    adjacency: Tensor<f64>,
}

impl<T: Real> TokenGraph<T> {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn meta(&self) -> &[NodeMeta] {
        &self.meta
    }

    /// Raw similarities `E`. The diagonal holds the self-similarity but is
    /// never used: it is excluded from the softmax that produces `A`.
    pub fn affinity(&self) -> &Tensor<f64> {
        &self.affinity
    }

    /// Row-stochastic `A`.
    pub fn adjacency(&self) -> &Tensor<f64> {
        &self.adjacency
    }
}

fn similarity_matrix<T: Real>(x: &Tensor<T>, sim: Similarity) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut rows: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    if sim == Similarity::Cosine {
        for r in rows.chunks_mut(d) {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        let a = &rows[i * d..(i + 1) * d];
        for j in i..n {
            let b = &rows[j * d..(j + 1) * d];
            let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            e[i * n + j] = s;
            e[j * n + i] = s;
        }
    }
    e
}

/// Builds the fully connected graph over `embeddings` (one row per node).
/// `A` is the row softmax of `E` with the diagonal and any pair rejected by
/// `mask` excluded.
pub fn build_graph<T: Real>(
    embeddings: Tensor<T>,
    meta: Vec<NodeMeta>,
    similarity: Similarity,
    mask: PairMask,
) -> Result<TokenGraph<T>> {
    let n = meta.len();
    if n == 0 {
        return Err(Error::param("token graph needs at least one node"));
    }
    if embeddings.rows() != n || embeddings.shape().len() != 2 {
        return Err(Error::dim("build_graph", embeddings.shape(), &[n]));
    }
    let e = similarity_matrix(&embeddings, similarity);
    let mut keep = mask.matrix(&meta);
    for i in 0..n {
        let row = &mut keep[i * n..(i + 1) * n];
        row[i] = false;
        if !row.iter().any(|&b| b) {
            // isolated node: its only admissible edge is to itself
            row[i] = true;
        }
    }
    let affinity = Tensor::new(vec![n, n], e)?;
    let adjacency = crate::numcore::masked_softmax_rows(&affinity, &keep, 1.0)?;
    Ok(TokenGraph {
        embeddings,
        meta,
        affinity,
        adjacency,
    })
}

/// Keeps the `k` largest entries of `row` (ties to the lower index), zeroes
/// the rest, and renormalizes to sum 1.
pub fn top_k_renormalize(row: &[f64], k: usize) -> Vec<f64> {
    let k = k.clamp(1, row.len().max(1));
    let mut order: Vec<usize> = (0..row.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, |&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    }
    let mut out = vec![0.0; row.len()];
    for &j in order.iter().take(k) {
        out[j] = row[j];
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Per row keeps the top `⌈keep_fraction·(Nn−1)⌉` entries of `A` and
/// renormalizes. Self-loop-only rows are left untouched.
pub fn sparsify<T: Real>(g: &TokenGraph<T>, keep_fraction: f64) -> Result<TokenGraph<T>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::param(format!("keep_fraction must be in (0,1], got {keep_fraction}")));
    }
    let n = g.len();
    if keep_fraction == 1.0 || n == 1 {
        return Ok(g.clone());
    }
    let k = ((keep_fraction * (n - 1) as f64).ceil() as usize).max(1);
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let row = g.adjacency.row(i);
        if row[i] == 1.0 {
            data.extend_from_slice(row);
        } else {
            data.extend(top_k_renormalize(row, k));
        }
    }
    Ok(TokenGraph {
        adjacency: Tensor::new(vec![n, n], data)?,
        ..g.clone()
    })
}

/// Cluster assignment for every node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&c) = assignment.iter().find(|&&c| c >= k) {
            return Err(Error::param(format!("cluster id {c} out of range for K = {k}")));
        }
        Ok(Partition { assignment, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    /// Node indices of every cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        self.assignment.iter().for_each(|&c| s[c] += 1);
        s
    }
}

/// Largest cluster size the balance rule admits.
pub fn balance_cap(n: usize, k: usize, balance_factor: f64) -> usize {
    let cap = (n.div_ceil(k) as f64 * balance_factor + 1e-9).floor() as usize;
    cap.max(n.div_ceil(k))
}

/// Symmetric weights `(A + Aᵀ)/2` as a dense row-major buffer.
fn symmetrize(a: &Tensor<f64>) -> Vec<f64> {
    let n = a.rows();
    let d = a.data();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = if i == j { 0.0 } else { 0.5 * (d[i * n + j] + d[j * n + i]) };
        }
    }
    w
}

/// Balanced K-way partition of the token graph's symmetrized adjacency.
pub fn partition<T: Real>(g: &TokenGraph<T>, k: usize, balance_factor: f64) -> Result<Partition> {
    partition_weights(&g.adjacency, k, balance_factor)
}

/// Balanced K-way partition of an arbitrary square weight matrix (it is
/// symmetrized first). Deterministic: ties always resolve to lower indices.
pub fn partition_weights(weights: &Tensor<f64>, k: usize, balance_factor: f64) -> Result<Partition> {
    let n = weights.rows();
    if weights.shape() != [n, n] {
        return Err(Error::dim("partition", weights.shape(), &[n, n]));
    }
    if k == 0 {
        return Err(Error::param("cluster count K must be positive"));
    }
    if k > n {
        return Err(Error::param(format!("K = {k} exceeds node count {n}")));
    }
    if balance_factor.is_nan() || balance_factor < 1.0 {
        return Err(Error::param(format!("balance_factor must be >= 1, got {balance_factor}")));
    }
    let w = symmetrize(weights);
    let cap = balance_cap(n, k, balance_factor);
    let mut assignment = vec![0; n];
    let nodes: Vec<usize> = (0..n).collect();
    split(&w, n, &nodes, k, 0, cap, &mut assignment);
    Partition::new(assignment, k)
}

fn split(w: &[f64], n: usize, nodes: &[usize], k: usize, base: usize, cap: usize, out: &mut [usize]) {
    if k == 1 {
        nodes.iter().for_each(|&v| out[v] = base);
        return;
    }
    let m = nodes.len();
    let k1 = k / 2;
    let k2 = k - k1;
    let lo = k1.max(m.saturating_sub(k2 * cap));
    let hi = (k1 * cap).min(m - k2);
    let target = ((m * k1) as f64 / k as f64).round() as usize;
    let target = target.clamp(lo, hi);

    let side = bisect(w, n, nodes, target, lo, hi);
    let (left, right): (Vec<usize>, Vec<usize>) = {
        let mut l = Vec::new();
        let mut r = Vec::new();
        for (i, &v) in nodes.iter().enumerate() {
            if side[i] {
                l.push(v);
            } else {
                r.push(v);
            }
        }
        (l, r)
    };
    split(w, n, &left, k1, base, cap, out);
    split(w, n, &right, k2, base + k1, cap, out);
}

/// Two-way split of `nodes`: returns `true` for members of the first side,
/// whose size stays within `[lo, hi]`.
fn bisect(w: &[f64], n: usize, nodes: &[usize], target: usize, lo: usize, hi: usize) -> Vec<bool> {
    let m = nodes.len();
    let mut sub = vec![0.0; m * m];
    for (a, &u) in nodes.iter().enumerate() {
        for (b, &v) in nodes.iter().enumerate() {
            sub[a * m + b] = w[u * n + v];
        }
    }
    let local = |a: usize, b: usize| sub[a * m + b];
    let mut best: Option<(f64, Vec<bool>)> = None;
    for seed in seeds(w, n, nodes) {
        let mut side = grow_region(m, seed, target, &local);
        refine(m, &mut side, lo, hi, &local);
        let cut = local_cut(m, &side, &local);
        if best.as_ref().is_none_or(|(c, _)| cut < *c - 1e-12) {
            best = Some((cut, side));
        }
    }
    best.expect("at least one seed").1
}

/// Candidate starting nodes for region growing: the lowest index, the
/// weakest and strongest connected nodes, and a spread of indices.
fn seeds(w: &[f64], n: usize, nodes: &[usize]) -> Vec<usize> {
    let m = nodes.len();
    let degree: Vec<f64> = nodes
        .iter()
        .map(|&a| nodes.iter().map(|&b| w[a * n + b]).sum())
        .collect();
    let argmin = (0..m).min_by(|&a, &b| degree[a].total_cmp(&degree[b]).then(a.cmp(&b))).unwrap_or(0);
    let argmax = (0..m).max_by(|&a, &b| degree[a].total_cmp(&degree[b]).then(b.cmp(&a))).unwrap_or(0);
    let mut out = vec![0, argmin, argmax];
    let extra = match m {
        0..=16 => m,
        17..=256 => 6,
        _ => 2,
    };
    for i in 0..extra {
        out.push(i * m / extra);
    }
    let mut seen = vec![false; m];
    out.retain(|&s| !std::mem::replace(&mut seen[s], true));
    out
}

fn grow_region(m: usize, seed: usize, target: usize, w: &impl Fn(usize, usize) -> f64) -> Vec<bool> {
    let mut side = vec![false; m];
    let mut conn = vec![0.0; m];
    let mut size = 0;
    let mut next = Some(seed);
    while size < target {
        let v = next.expect("candidate exists while region is below target");
        side[v] = true;
        size += 1;
        for u in 0..m {
            conn[u] += w(u, v);
        }
        next = (0..m)
            .filter(|&u| !side[u])
            .max_by(|&a, &b| conn[a].total_cmp(&conn[b]).then(b.cmp(&a)));
    }
    side
}

fn local_cut(m: usize, side: &[bool], w: &impl Fn(usize, usize) -> f64) -> f64 {
    let mut cut = 0.0;
    for a in 0..m {
        for b in a + 1..m {
            if side[a] != side[b] {
                cut += w(a, b);
            }
        }
    }
    cut
}

/// Kernighan–Lin refinement passes with single-vertex moves. Each pass moves
/// every vertex at most once, always taking the best admissible gain, then
/// rolls back to the best prefix. A pass ends early after `STALL` moves
/// without a new best; refinement stops when a pass yields no improvement.
fn refine(m: usize, side: &mut [bool], lo: usize, hi: usize, w: &impl Fn(usize, usize) -> f64) {
    const MAX_PASSES: usize = 16;
    const STALL: usize = 64;
    for _ in 0..MAX_PASSES {
        let mut gain = vec![0.0; m];
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    let wab = w(a, b);
                    gain[a] += if side[a] == side[b] { -wab } else { wab };
                }
            }
        }
        let mut size = side.iter().filter(|&&s| s).count();
        let mut locked = vec![false; m];
        let mut moves = Vec::with_capacity(m);
        let mut running = 0.0;
        let mut best = (0.0, 0usize);
        for _ in 0..m {
            let pick = (0..m)
                .filter(|&v| !locked[v])
                .filter(|&v| {
                    let after = if side[v] { size - 1 } else { size + 1 };
                    (lo..=hi).contains(&after)
                })
                .max_by(|&a, &b| gain[a].total_cmp(&gain[b]).then(b.cmp(&a)));
            let Some(v) = pick else { break };
            running += gain[v];
            let from = side[v];
            side[v] = !from;
            size = if from { size - 1 } else { size + 1 };
            locked[v] = true;
            moves.push(v);
            for u in 0..m {
                if u != v {
                    let wuv = w(u, v);
                    // v left u's side: u now gains by following; v joined u's side: moving u costs more
                    gain[u] += if side[u] == from { 2.0 * wuv } else { -2.0 * wuv };
                }
            }
            gain[v] = -gain[v];
            if running > best.0 + 1e-12 {
                best = (running, moves.len());
            } else if moves.len() - best.1 >= STALL {
                break;
            }
        }
        for &v in moves[best.1..].iter().rev() {
            side[v] = !side[v];
        }
        if best.1 == 0 {
            break;
        }
    }
}

/// Sum of symmetrized weights `(A_ij + A_ji)/2` over unordered pairs in
/// different clusters.
pub fn cut_weight<T: Real>(g: &TokenGraph<T>, p: &Partition) -> Result<f64> {
    cut_weight_matrix(&g.adjacency, p)
}

pub fn cut_weight_matrix(weights: &Tensor<f64>, p: &Partition) -> Result<f64> {
    let n = weights.rows();
    if p.len() != n {
        return Err(Error::usage(format!(
            "partition covers {} nodes, graph has {n}",
            p.len()
        )));
    }
    let w = symmetrize(weights);
    let a = p.assignment();
    let mut cut = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if a[i] != a[j] {
                cut += w[i * n + j];
            }
        }
    }
    Ok(cut)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(n: usize) -> Vec<NodeMeta> {
        (0..n)
            .map(|i| NodeMeta {
                image_id: i,
                view_id: 0,
                token_index: 0,
                role: Role::Query,
                label: None,
            })
            .collect()
    }

    #[test]
    fn identical_pair_forces_single_neighbor() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let g = build_graph(x, meta(2), Similarity::Cosine, PairMask::None).unwrap();
        assert_eq!(g.adjacency().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn orthogonal_triple_is_uniform() {
        let x = Tensor::<f64>::eye(3);
        let g = build_graph(x, meta(3), Similarity::Cosine, PairMask::None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert!((g.adjacency().get2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_graph_rejected() {
        let x = Tensor::<f64>::zeros(&[0, 2]);
        assert!(matches!(
            build_graph(x, vec![], Similarity::Cosine, PairMask::None),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn single_node_self_loop() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 2.0]]);
        let g = build_graph(x, meta(1), Similarity::Cosine, PairMask::None).unwrap();
        assert_eq!(g.adjacency().data(), &[1.0]);
    }

    #[test]
    fn sibling_views_excluded() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.1], vec![0.0, 1.0]]);
        let mut m = meta(3);
        m[1].image_id = 0;
        m[1].view_id = 1;
        let g = build_graph(x, m, Similarity::Cosine, PairMask::SameImage).unwrap();
        assert_eq!(g.adjacency().get2(0, 1), 0.0);
        assert_eq!(g.adjacency().get2(0, 2), 1.0);
    }

    #[test]
    fn top_k_closed_form() {
        let r = top_k_renormalize(&[0.5, 0.3, 0.2], 2);
        assert!((r[0] - 0.625).abs() < 1e-12);
        assert!((r[1] - 0.375).abs() < 1e-12);
        assert_eq!(r[2], 0.0);
        // ties go to the lower column
        assert_eq!(top_k_renormalize(&[0.25, 0.25, 0.5], 2), vec![1.0 / 3.0, 0.0, 2.0 / 3.0]);
    }

    #[test]
    fn sparsify_counts_and_identity() {
        let mut rng = crate::numcore::RngStream::new(9, 0);
        let x: Tensor<f64> = crate::nn::normal(&mut rng, &[11, 4], 1.0);
        let g = build_graph(x, meta(11), Similarity::Cosine, PairMask::None).unwrap();
        assert_eq!(sparsify(&g, 1.0).unwrap().adjacency(), g.adjacency());
        let s = sparsify(&g, 0.5).unwrap();
        for i in 0..11 {
            let row = s.adjacency().row(i);
            assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), 5);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(sparsify(&g, 0.0).is_err());
    }

    #[test]
    fn singleton_partition_when_k_equals_n() {
        let w = Tensor::<f64>::full(&[5, 5], 1.0);
        let p = partition_weights(&w, 5, 1.3).unwrap();
        let mut ids = p.assignment().to_vec();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert!(partition_weights(&w, 6, 1.3).is_err());
        assert!(partition_weights(&w, 0, 1.3).is_err());
    }

    #[test]
    fn cut_weight_cases() {
        let w = Tensor::<f64>::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let single = Partition::new(vec![0, 1], 2).unwrap();
        assert_eq!(cut_weight_matrix(&w, &single).unwrap(), 1.0);
        let one = Partition::new(vec![0, 0], 1).unwrap();
        assert_eq!(cut_weight_matrix(&w, &one).unwrap(), 0.0);
        let bad = Partition::new(vec![0, 0, 0], 1).unwrap();
        assert!(matches!(cut_weight_matrix(&w, &bad), Err(Error::Usage(_))));
    }
}
