//! Episodic few-shot protocol: class splits, episode sampling, augmented
//! views, the episode pipeline (graph, partition, weighting, refinement),
//! losses, inner-loop adaptation, meta-training and evaluation.

use std::collections::BTreeSet;
use std::sync::Arc;

use log::info;
use rayon::prelude::*;

use crate::batr::{self, HeadConfig, Stages};
use crate::error::{Error, Result};
use crate::numcore::{Bound, MomentumSgd, ParamStore, Real, RngStream, Tape, Tensor, Var};
use crate::tokengraph::{self, NodeMeta, PairMask, Partition, Role, Similarity};
use crate::vit::{patchify_image, BackboneConfig, ImageBatch, Vit};
use crate::weighting::{self, Combine, ImportanceMask, UncertaintyReport};

/// Images of a labeled dataset restricted to a class pool.
#[derive(Clone, Debug)]
pub struct Split {
    data: Arc<ImageBatch>,
    classes: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl Split {
    pub fn new(data: Arc<ImageBatch>, classes: &[usize]) -> Result<Self> {
        let labels = data
            .labels()
            .ok_or_else(|| Error::dataset("split needs a labeled dataset"))?;
        let pool: BTreeSet<usize> = classes.iter().copied().collect();
        if pool.len() != classes.len() {
            return Err(Error::dataset("class pool lists a class twice"));
        }
        let mut by_class = vec![Vec::new(); classes.len()];
        for (i, l) in labels.iter().enumerate() {
            if let Some(pos) = classes.iter().position(|c| c == l) {
                by_class[pos].push(i);
            }
        }
        if let Some(pos) = by_class.iter().position(|v| v.is_empty()) {
            return Err(Error::dataset(format!("class {} has no images", classes[pos])));
        }
        Ok(Split {
            data,
            classes: classes.to_vec(),
            by_class,
        })
    }

    pub fn data(&self) -> &ImageBatch {
        &self.data
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn images_of(&self, class_pos: usize) -> &[usize] {
        &self.by_class[class_pos]
    }
}

/// Splits over pairwise-disjoint class pools of one dataset.
pub fn disjoint_splits(data: Arc<ImageBatch>, pools: &[Vec<usize>]) -> Result<Vec<Split>> {
    for (a, pa) in pools.iter().enumerate() {
        for pb in &pools[a + 1..] {
            if let Some(c) = pa.iter().find(|c| pb.contains(c)) {
                return Err(Error::dataset(format!("class {c} appears in two class pools")));
            }
        }
    }
    pools.iter().map(|p| Split::new(data.clone(), p)).collect()
}

/// One N-way K-shot task. Image entries are `(dataset index, episode label)`,
/// class-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.1).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|q| q.1).collect()
    }
}

pub fn sample_episode(split: &Split, way: usize, shot: usize, query: usize, rng: &mut RngStream) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(Error::param("way and shot must be at least 1"));
    }
    if split.classes.len() < way {
        return Err(Error::dataset(format!(
            "{way}-way episode needs {way} classes, split has {}",
            split.classes.len()
        )));
    }
    let picked = rng.sample_indices(split.classes.len(), way);
    let mut support = Vec::with_capacity(way * shot);
    let mut queries = Vec::with_capacity(way * query);
    for (label, &pos) in picked.iter().enumerate() {
        let pool = &split.by_class[pos];
        if pool.len() < shot + query {
            return Err(Error::dataset(format!(
                "class {} has {} images, episode needs {}",
                split.classes[pos],
                pool.len(),
                shot + query
            )));
        }
        let draw = rng.sample_indices(pool.len(), shot + query);
        support.extend(draw[..shot].iter().map(|&i| (pool[i], label)));
        queries.extend(draw[shot..].iter().map(|&i| (pool[i], label)));
    }
    Ok(Episode {
        way,
        shot,
        query_per_class: query,
        classes: picked.iter().map(|&p| split.classes[p]).collect(),
        support,
        query: queries,
    })
}

/// Crop window and per-channel gain of one augmented view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewParams {
    pub top: usize,
    pub left: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub jitter: Vec<f64>,
}

impl ViewParams {
    pub fn identity(c: usize, h: usize, w: usize) -> Self {
        ViewParams {
            top: 0,
            left: 0,
            crop_h: h,
            crop_w: w,
            jitter: vec![1.0; c],
        }
    }

    /// Crop covering at least 80% of the area, gains in `[0.8, 1.2]`.
    pub fn draw(c: usize, h: usize, w: usize, rng: &mut RngStream) -> Self {
        let s = rng.uniform_in(0.8, 1.0).sqrt();
        let crop_h = ((h as f64 * s).ceil() as usize).clamp(1, h);
        let crop_w = ((w as f64 * s).ceil() as usize).clamp(1, w);
        let top = rng.below(h - crop_h + 1);
        let left = rng.below(w - crop_w + 1);
        let jitter = (0..c).map(|_| rng.uniform_in(0.8, 1.2)).collect();
        ViewParams {
            top,
            left,
            crop_h,
            crop_w,
            jitter,
        }
    }
}

/// Bilinear resample of the crop back to `h × w`, then channel gains,
/// clamped to `[0, 1]`.
pub fn apply_view(img: &[f32], c: usize, h: usize, w: usize, v: &ViewParams) -> Vec<f32> {
    let sample = |src: f64, len: usize| -> (usize, usize, f64) {
        let s = src.clamp(0.0, (len - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(len - 1), s - lo as f64)
    };
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        let sy = v.top as f64 + (y as f64 + 0.5) * v.crop_h as f64 / h as f64 - 0.5;
        let (y0, y1, fy) = sample(sy, h);
        for x in 0..w {
            let sx = v.left as f64 + (x as f64 + 0.5) * v.crop_w as f64 / w as f64 - 0.5;
            let (x0, x1, fx) = sample(sx, w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| img[ch * h * w + yy * w + xx] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let val = (top * (1.0 - fy) + bot * fy) * v.jitter[ch];
                out[ch * h * w + y * w + x] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

pub fn augment_views(img: &[f32], c: usize, h: usize, w: usize, rng: &mut RngStream) -> (Vec<f32>, Vec<f32>) {
    let a = ViewParams::draw(c, h, w, rng);
    let b = ViewParams::draw(c, h, w, rng);
    (apply_view(img, c, h, w, &a), apply_view(img, c, h, w, &b))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.4, beta: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::param(format!(
                "loss weights need alpha, beta >= 0 with a positive sum, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

pub const SEP_EPS: f64 = 1e-8;
/// On the tape distances are `d²/sqrt(d² + DIST_SMOOTH)`: exactly zero for
/// coincident points, with a finite gradient there.
const DIST_SMOOTH: f64 = 1e-12;

fn pair_lists(labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<bool>)> {
    let (mut is, mut js, mut same) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            is.push(i);
            js.push(j);
            same.push(labels[i] == labels[j]);
        }
    }
    if !same.iter().any(|s| !s) {
        return Err(Error::param("separation penalty needs at least two classes"));
    }
    Ok((is, js, same))
}

/// Summed same-class Euclidean distances over summed cross-class distances
/// (plus a small guard), over unordered pairs.
pub fn separation_penalty<T: Real>(emb: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if emb.rows() != labels.len() {
        return Err(Error::dim("separation_penalty", &[labels.len()], &[emb.rows()]));
    }
    let (is, js, same) = pair_lists(labels)?;
    let (mut num, mut den) = (0.0, 0.0);
    for ((&i, &j), &s) in is.iter().zip(&js).zip(&same) {
        let d = emb
            .row(i)
            .iter()
            .zip(emb.row(j))
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        if s {
            num += d;
        } else {
            den += d;
        }
    }
    Ok(num / (den + SEP_EPS))
}

pub fn separation_penalty_on_tape<T: Real>(tape: &mut Tape<T>, emb: Var, labels: &[usize]) -> Result<Var> {
    if tape.shape(emb)[0] != labels.len() {
        return Err(Error::dim("separation_penalty", &[labels.len()], &tape.shape(emb)));
    }
    let (is, js, same) = pair_lists(labels)?;
    let a = tape.gather_rows(emb, &is)?;
    let b = tape.gather_rows(emb, &js)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    let d2 = tape.sum_cols(sq)?;
    let s = tape.add_scalar(d2, DIST_SMOOTH)?;
    let s = tape.sqrt(s)?;
    let d = tape.div(d2, s)?;
    let pos: Vec<T> = same.iter().map(|&s| if s { T::one() } else { T::zero() }).collect();
    let neg: Vec<T> = same.iter().map(|&s| if s { T::zero() } else { T::one() }).collect();
    let num = tape.mul_const(d, pos)?;
    let num = tape.sum(num)?;
    let den = tape.mul_const(d, neg)?;
    let den = tape.sum(den)?;
    let den = tape.add_scalar(den, SEP_EPS)?;
    tape.div(num, den)
}

fn normalize_rows<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let sq = tape.square(x)?;
    let n = tape.sum_cols(sq)?;
    let n = tape.add_scalar(n, 1e-12)?;
    let n = tape.sqrt(n)?;
    let inv = tape.recip(n)?;
    tape.mul_col(x, inv)
}

/// Cosine similarity of every query row to every class prototype (mean of
/// that class's support rows), divided by `tau_cls`.
pub fn prototype_logits_on_tape<T: Real>(
    tape: &mut Tape<T>,
    support: Var,
    support_labels: &[usize],
    classes: usize,
    query: Var,
    tau_cls: f64,
) -> Result<Var> {
    if !(tau_cls > 0.0) {
        return Err(Error::param(format!("tau_cls must be positive, got {tau_cls}")));
    }
    let s = support_labels.len();
    let mut avg = vec![T::zero(); classes * s];
    for c in 0..classes {
        let members: Vec<usize> = (0..s).filter(|&i| support_labels[i] == c).collect();
        if members.is_empty() {
            return Err(Error::param(format!("class {c} has no support rows")));
        }
        for &i in &members {
            avg[c * s + i] = T::of(1.0 / members.len() as f64);
        }
    }
    let avg = tape.constant(Tensor::new(vec![classes, s], avg)?)?;
    let protos = tape.matmul(avg, support)?;
    let pn = normalize_rows(tape, protos)?;
    let qn = normalize_rows(tape, query)?;
    let cos = tape.matmul_nt(qn, pn)?;
    tape.scale(cos, 1.0 / tau_cls)
}

/// Value-level classification: logits of every query row.
pub fn classify<T: Real>(
    support: &Tensor<T>,
    support_labels: &[usize],
    classes: usize,
    query: &Tensor<T>,
    tau_cls: f64,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let s = tape.constant(support.clone())?;
    let q = tape.constant(query.clone())?;
    let l = prototype_logits_on_tape(&mut tape, s, support_labels, classes, q, tau_cls)?;
    Ok(tape.value(l).clone())
}

pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == labels[i]
        })
        .count();
    hits as f64 / logits.rows().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaLoss {
    pub total: f64,
    pub ce: f64,
    pub sep: f64,
}

pub struct MetaLossVars {
    pub total: Var,
    pub ce: Var,
    pub sep: Var,
}

/// `α·CE + β·L_sep`.
pub fn meta_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    sep_emb: Var,
    sep_labels: &[usize],
    w: LossWeights,
) -> Result<MetaLossVars> {
    w.validate()?;
    let ce = tape.cross_entropy(logits, labels)?;
    let sep = separation_penalty_on_tape(tape, sep_emb, sep_labels)?;
    let a = tape.scale(ce, w.alpha)?;
    let b = tape.scale(sep, w.beta)?;
    let total = tape.add(a, b)?;
    Ok(MetaLossVars { total, ce, sep })
}

pub fn meta_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    sep_emb: &Tensor<T>,
    sep_labels: &[usize],
    w: LossWeights,
) -> Result<MetaLoss> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone())?;
    let e = tape.constant(sep_emb.clone())?;
    let v = meta_loss_on_tape(&mut tape, l, labels, e, sep_labels, w)?;
    let ce = tape.scalar_value(v.ce).as_f64();
    let sep = separation_penalty(sep_emb, sep_labels)?;
    Ok(MetaLoss {
        total: w.alpha * ce + w.beta * sep,
        ce,
        sep,
    })
}

/// Everything that shapes one episode forward pass apart from the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub similarity: Similarity,
    pub pair_mask: PairMask,
    pub keep_fraction: f64,
    pub clusters: usize,
    pub balance_factor: f64,
    pub k_local: usize,
    pub k_global: usize,
    pub mc_passes: usize,
    pub mc_rate: f64,
    /// `None` disables importance weighting and pruning.
    pub weighting: Option<Combine>,
    pub stages: Stages,
    pub tau_cls: f64,
    pub loss: LossWeights,
    pub inner_iters: usize,
    pub inner_lr: f64,
    /// Run the inner loop before predicting at evaluation time.
    pub adapt: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            similarity: Similarity::Cosine,
            pair_mask: PairMask::SameImage,
            keep_fraction: 0.5,
            clusters: 20,
            balance_factor: 1.3,
            k_local: 20,
            k_global: 20,
            mc_passes: 8,
            mc_rate: 0.1,
            weighting: Some(Combine::Product),
            stages: Stages::default(),
            tau_cls: 0.1,
            loss: LossWeights::default(),
            inner_iters: 35,
            inner_lr: 0.1,
            adapt: true,
        }
    }
}

impl PipelineConfig {
    pub fn uses_head(&self) -> bool {
        self.stages.bilevel || self.stages.propagate
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::param(format!("keep_fraction must be in (0,1], got {}", self.keep_fraction)));
        }
        if self.clusters == 0 || self.k_local == 0 || self.k_global == 0 {
            return Err(Error::param("clusters, k_local and k_global must be at least 1"));
        }
        if self.balance_factor < 1.0 {
            return Err(Error::param(format!("balance_factor must be >= 1, got {}", self.balance_factor)));
        }
        if self.mc_passes < 2 || !(0.0..1.0).contains(&self.mc_rate) {
            return Err(Error::param("MC dropout needs >= 2 passes and a rate in [0,1)"));
        }
        if !(self.tau_cls > 0.0) || self.inner_lr < 0.0 {
            return Err(Error::param("tau_cls must be positive and inner_lr non-negative"));
        }
        Ok(())
    }
}

/// Which encoder weights produce token embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneSource {
    /// Current `enc.*` weights.
    Current,
    /// Snapshot taken right after pretraining, stored as `pretrain.enc.*`.
    Pretrained,
}

const PRETRAIN_PREFIX: &str = "pretrain.";

/// Backbone plus refinement head.
#[derive(Clone, Debug)]
pub struct ModelState<T: Real = f32> {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> ModelState<T> {
    /// Fresh head on top of `pretrained` encoder/decoder weights, keeping a
    /// frozen copy of the pretrained encoder.
    pub fn from_pretrained(
        backbone: BackboneConfig,
        head: HeadConfig,
        pretrained: &ParamStore<T>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        backbone.validate()?;
        if head.dim != backbone.embed_dim {
            return Err(Error::param(format!(
                "head dim {} differs from embed dim {}",
                head.dim, backbone.embed_dim
            )));
        }
        let mut params = ParamStore::new();
        for (name, t) in pretrained.iter() {
            if name.starts_with("enc.") || name.starts_with("dec.") {
                params.insert(name.clone(), t.clone());
            }
        }
        for (name, t) in pretrained.filter_prefix("enc.").iter() {
            params.insert(format!("{PRETRAIN_PREFIX}{name}"), t.clone());
        }
        params.extend(batr::init_params(&head, rng)?);
        Ok(ModelState { backbone, head, params })
    }

    pub fn vit(&self) -> Result<Vit> {
        Vit::new(self.backbone.clone())
    }

    /// `enc.*` weights for the given source.
    pub fn encoder(&self, source: BackboneSource) -> ParamStore<T> {
        match source {
            BackboneSource::Current => self.params.filter_prefix("enc."),
            BackboneSource::Pretrained => {
                let mut out = ParamStore::new();
                for (name, t) in self.params.iter() {
                    if let Some(rest) = name.strip_prefix(PRETRAIN_PREFIX) {
                        out.insert(rest.to_string(), t.clone());
                    }
                }
                if out.is_empty() {
                    self.params.filter_prefix("enc.")
                } else {
                    out
                }
            }
        }
    }

    pub fn head_params(&self) -> ParamStore<T> {
        self.params.filter_prefix(batr::PREFIX)
    }

    pub fn backbone_fingerprint(&self) -> String {
        let mut s = self.params.filter_prefix("enc.");
        s.extend(self.params.filter_prefix("dec."));
        s.fingerprint()
    }
}

/// Image order, node metadata and class-token rows of one episode graph.
#[derive(Clone, Debug)]
pub struct Layout {
    pub images: Vec<Vec<f32>>,
    pub meta: Vec<NodeMeta>,
    pub tokens_per_image: usize,
    pub classes: usize,
    /// Class-token node of every support view, with its label.
    pub support_rows: Vec<usize>,
    pub support_labels: Vec<usize>,
    /// Rows classified by the prototypes and their labels.
    pub target_rows: Vec<usize>,
    pub target_labels: Vec<usize>,
    /// Query images may only look at support images and themselves.
    pub guard_queries: bool,
}

impl Layout {
    fn push_image(&mut self, img: Vec<f32>, image_id: usize, view_id: usize, role: Role, label: usize) -> usize {
        let base = self.meta.len();
        for t in 0..self.tokens_per_image {
            self.meta.push(NodeMeta {
                image_id,
                view_id,
                token_index: t,
                role,
                label: (role == Role::Support).then_some(label),
            });
        }
        self.images.push(img);
        base
    }

    /// Support views as pseudo-support (view 0) and pseudo-query (view 1).
    pub fn pseudo(views: &[(Vec<f32>, Vec<f32>)], labels: &[usize], classes: usize, tokens: usize) -> Self {
        let mut l = Layout::empty(classes, tokens, false);
        for (s, (v, _)) in views.iter().enumerate() {
            let r = l.push_image(v.clone(), s, 0, Role::Support, labels[s]);
            l.support_rows.push(r);
            l.support_labels.push(labels[s]);
        }
        for (s, (_, v)) in views.iter().enumerate() {
            let r = l.push_image(v.clone(), s, 1, Role::Support, labels[s]);
            l.target_rows.push(r);
            l.target_labels.push(labels[s]);
        }
        l
    }

    /// Both support views followed by the query images.
    pub fn full(
        views: &[(Vec<f32>, Vec<f32>)],
        labels: &[usize],
        queries: Vec<Vec<f32>>,
        query_labels: &[usize],
        classes: usize,
        tokens: usize,
    ) -> Self {
        let mut l = Layout::empty(classes, tokens, true);
        for view in 0..2 {
            for (s, pair) in views.iter().enumerate() {
                let img = if view == 0 { pair.0.clone() } else { pair.1.clone() };
                let r = l.push_image(img, s, view, Role::Support, labels[s]);
                l.support_rows.push(r);
                l.support_labels.push(labels[s]);
            }
        }
        let s = views.len();
        for (j, img) in queries.into_iter().enumerate() {
            let r = l.push_image(img, s + j, 0, Role::Query, query_labels[j]);
            l.target_rows.push(r);
            l.target_labels.push(query_labels[j]);
        }
        l
    }

    fn empty(classes: usize, tokens: usize, guard_queries: bool) -> Self {
        Layout {
            images: Vec::new(),
            meta: Vec::new(),
            tokens_per_image: tokens,
            classes,
            support_rows: Vec::new(),
            support_labels: Vec::new(),
            target_rows: Vec::new(),
            target_labels: Vec::new(),
            guard_queries,
        }
    }

    /// Rows entering the separation penalty: every support class token,
    /// which in a pseudo-episode includes the pseudo-query views.
    pub fn sep_rows(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = self.support_rows.clone();
        let mut labels = self.support_labels.clone();
        if !self.guard_queries {
            rows.extend(&self.target_rows);
            labels.extend(&self.target_labels);
        }
        (rows, labels)
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn batch(&self, c: usize, h: usize, w: usize) -> Result<ImageBatch> {
        let refs: Vec<&[f32]> = self.images.iter().map(|v| v.as_slice()).collect();
        ImageBatch::from_images(&refs, c, h, w)
    }

    /// Attention admissibility: the pair mask, plus (for query-bearing
    /// layouts) no attention into query images other than one's own.
    pub fn attention_keep(&self, mask: PairMask) -> Vec<bool> {
        let n = self.meta.len();
        let mut keep = mask.matrix(&self.meta);
        if self.guard_queries {
            for i in 0..n {
                for j in 0..n {
                    let (a, b) = (&self.meta[i], &self.meta[j]);
                    if b.role == Role::Query && a.image_id != b.image_id {
                        keep[i * n + j] = false;
                    }
                }
                if !keep[i * n..(i + 1) * n].iter().any(|&k| k) {
                    keep[i * n + i] = true;
                }
            }
        }
        keep
    }
}

/// Episode structure derived from detached embeddings: partition, mask and
/// attention admissibility.
#[derive(Clone, Debug)]
pub struct Prepared<T: Real> {
    pub embeddings: Tensor<T>,
    pub partition: Partition,
    pub mask: ImportanceMask,
    pub keep: Vec<bool>,
    pub uncertainty: UncertaintyReport,
}

fn encode_layout<T: Real>(state: &ModelState<T>, enc: &ParamStore<T>, layout: &Layout) -> Result<Tensor<T>> {
    let b = &state.backbone;
    let batch = layout.batch(b.channels, b.height, b.width)?;
    let sets = state.vit()?.encode(enc, &batch, None, &RngStream::new(0, 0), false)?;
    let parts: Vec<&Tensor<T>> = sets.iter().map(|s| &s.tokens).collect();
    Tensor::vstack(&parts)
}

fn needs_uncertainty(cfg: &PipelineConfig) -> bool {
    cfg.uses_head() && matches!(cfg.weighting, Some(Combine::Product | Combine::Uncertainty))
}

/// MC-dropout variances of every node of `layout`.
pub fn layout_uncertainty<T: Real>(
    state: &ModelState<T>,
    source: BackboneSource,
    layout: &Layout,
    cfg: &PipelineConfig,
    rng: &RngStream,
) -> Result<UncertaintyReport> {
    let b = &state.backbone;
    let batch = layout.batch(b.channels, b.height, b.width)?;
    weighting::mc_uncertainty(b, &state.encoder(source), &batch, cfg.mc_passes, cfg.mc_rate, rng)
}

/// Builds the episode structure. `shared` holds MC variances for a layout
/// whose leading nodes are this layout's; without it they are measured here.
pub fn prepare<T: Real>(
    state: &ModelState<T>,
    source: BackboneSource,
    layout: &Layout,
    cfg: &PipelineConfig,
    shared: Option<&UncertaintyReport>,
    rng: &RngStream,
) -> Result<Prepared<T>> {
    let enc = state.encoder(source);
    let embeddings = encode_layout(state, &enc, layout)?;
    let n = layout.len();
    let keep = layout.attention_keep(cfg.pair_mask);
    if !cfg.uses_head() {
        let partition = Partition::new(vec![0; n], 1)?;
        let mask = ImportanceMask::uniform(&partition);
        return Ok(Prepared {
            embeddings,
            partition,
            mask,
            keep,
            uncertainty: UncertaintyReport::zeros(n),
        });
    }
    let graph = tokengraph::build_graph(embeddings.clone(), layout.meta.clone(), cfg.similarity, cfg.pair_mask)?;
    let graph = tokengraph::sparsify(&graph, cfg.keep_fraction)?;
    let partition = tokengraph::partition(&graph, cfg.clusters.min(n), cfg.balance_factor)?;
    let (mask, uncertainty) = match cfg.weighting {
        None => (ImportanceMask::uniform(&partition), UncertaintyReport::zeros(n)),
        Some(rule) => {
            let unc = match shared {
                _ if !needs_uncertainty(cfg) => UncertaintyReport::zeros(n),
                Some(u) if u.variance.len() >= n => u.prefix(n),
                _ => layout_uncertainty(state, source, layout, cfg, &rng.fork(1))?,
            };
            let syn = weighting::synergy(graph.adjacency(), graph.affinity())?;
            let mask = weighting::build_mask(&syn, &unc, &partition, cfg.k_local, cfg.k_global, rule)?;
            (mask, unc)
        }
    };
    Ok(Prepared {
        embeddings,
        partition,
        mask,
        keep,
        uncertainty,
    })
}

/// Refinement (when enabled) and the meta objective on the tape.
pub fn objective_on_tape<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    head: &HeadConfig,
    h0: Var,
    prep: &Prepared<T>,
    layout: &Layout,
    cfg: &PipelineConfig,
) -> Result<(MetaLossVars, Var)> {
    let nodes = if cfg.uses_head() {
        batr::refine(tape, bound, head, h0, &prep.partition, &prep.mask, Some(&prep.keep), cfg.stages)?.nodes
    } else {
        h0
    };
    let support = tape.gather_rows(nodes, &layout.support_rows)?;
    let targets = tape.gather_rows(nodes, &layout.target_rows)?;
    let logits = prototype_logits_on_tape(tape, support, &layout.support_labels, layout.classes, targets, cfg.tau_cls)?;
    let (sep_rows, sep_labels) = layout.sep_rows();
    let sep_emb = tape.gather_rows(nodes, &sep_rows)?;
    let loss = meta_loss_on_tape(tape, logits, &layout.target_labels, sep_emb, &sep_labels, cfg.loss)?;
    Ok((loss, logits))
}

/// Head-only SGD on the pseudo-episode. Returns the adapted head and the
/// loss before every step plus after the last one.
pub fn inner_adapt<T: Real>(
    state: &ModelState<T>,
    prep: &Prepared<T>,
    layout: &Layout,
    cfg: &PipelineConfig,
    iterations: usize,
    lr: f64,
) -> Result<(ParamStore<T>, Vec<f64>)> {
    if iterations < 1 {
        return Err(Error::param("inner loop needs at least one iteration"));
    }
    if lr < 0.0 {
        return Err(Error::param(format!("inner lr must be non-negative, got {lr}")));
    }
    let mut head = state.head_params();
    let mut trace = Vec::with_capacity(iterations + 1);
    for step in 0..=iterations {
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape, |_| step < iterations)?;
        let h0 = tape.constant(prep.embeddings.clone())?;
        let (loss, _) = objective_on_tape(&mut tape, &bound, &state.head, h0, prep, layout, cfg)?;
        trace.push(tape.scalar_value(loss.total).as_f64());
        if step == iterations {
            break;
        }
        let mut grads = tape.backward(loss.total)?;
        head.accumulate_grads(&bound, &mut grads)?;
        head.sgd_step(lr)?;
    }
    Ok((head, trace))
}

/// Support views and query images of an episode, drawn from `rng`.
fn episode_views(split: &Split, ep: &Episode, rng: &mut RngStream) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let (c, h, w) = split.data.dims();
    Ok(ep
        .support
        .iter()
        .map(|&(i, _)| augment_views(split.data.image(i), c, h, w, rng))
        .collect())
}

fn layouts(split: &Split, ep: &Episode, tokens: usize, rng: &mut RngStream) -> Result<(Layout, Layout)> {
    let views = episode_views(split, ep, rng)?;
    let labels = ep.support_labels();
    let pseudo = Layout::pseudo(&views, &labels, ep.way, tokens);
    let queries = ep.query.iter().map(|&(i, _)| split.data.image(i).to_vec()).collect();
    let full = Layout::full(&views, &labels, queries, &ep.query_labels(), ep.way, tokens);
    Ok((pseudo, full))
}

/// Accuracy on one sampled episode, adapting the head first when enabled.
pub fn run_episode<T: Real>(
    state: &ModelState<T>,
    source: BackboneSource,
    split: &Split,
    ep: &Episode,
    cfg: &PipelineConfig,
    rng: &RngStream,
) -> Result<f64> {
    let tokens = state.backbone.num_patches() + 1;
    let (pseudo, full) = layouts(split, ep, tokens, &mut rng.fork(0))?;
    let unc = match needs_uncertainty(cfg) {
        true => Some(layout_uncertainty(state, source, &full, cfg, &rng.fork(3))?),
        false => None,
    };
    let mut adapted = state.clone();
    if cfg.uses_head() && cfg.adapt {
        let prep = prepare(state, source, &pseudo, cfg, unc.as_ref(), &rng.fork(1))?;
        let (head, _) = inner_adapt(state, &prep, &pseudo, cfg, cfg.inner_iters, cfg.inner_lr)?;
        adapted.params.extend(head);
    }
    let prep = prepare(&adapted, source, &full, cfg, unc.as_ref(), &rng.fork(2))?;
    let mut tape = Tape::new();
    let bound = adapted.head_params().bind(&mut tape, |_| false)?;
    let h0 = tape.constant(prep.embeddings.clone())?;
    let (_, logits) = objective_on_tape(&mut tape, &bound, &adapted.head, h0, &prep, &full, cfg)?;
    Ok(accuracy(tape.value(logits), &full.target_labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = if accuracies.len() > 1 {
            accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        EvalReport {
            mean,
            ci95: 1.96 * var.sqrt() / n.sqrt(),
            accuracies,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

/// Threads for evaluation: `BATR_THREADS` when set, else all cores.
pub fn eval_threads() -> usize {
    std::env::var("BATR_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Mean accuracy over `episodes` tasks. Episode `e` draws everything from
/// `rng.fork(e)`, so results do not depend on the thread count.
pub fn evaluate<T: Real>(
    state: &ModelState<T>,
    source: BackboneSource,
    split: &Split,
    shape: EpisodeShape,
    episodes: usize,
    cfg: &PipelineConfig,
    rng: &RngStream,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::param("evaluation needs at least one episode"));
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_threads())
        .build()
        .map_err(|e| Error::usage(format!("thread pool: {e}")))?;
    let accs: Result<Vec<f64>> = pool.install(|| {
        (0..episodes)
            .into_par_iter()
            .map(|e| {
                let r = rng.fork(e as u64);
                let ep = sample_episode(split, shape.way, shape.shot, shape.query, &mut r.fork(0))?;
                run_episode(state, source, split, &ep, cfg, &r.fork(1))
            })
            .collect()
    });
    Ok(EvalReport::from_accuracies(accs?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub val_tasks: usize,
    pub shape: EpisodeShape,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            epochs: 10,
            tasks_per_epoch: 100,
            val_tasks: 50,
            shape: EpisodeShape {
                way: 5,
                shot: 1,
                query: 15,
            },
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_sep: f64,
    pub val_acc: f64,
    pub ci: f64,
}

/// One outer step: adapt the head on the pseudo-episode, then take the
/// query objective's gradient at the adapted head and apply it to the
/// original head and the encoder.
pub fn meta_step<T: Real>(
    state: &mut ModelState<T>,
    opt: &mut MomentumSgd<T>,
    split: &Split,
    ep: &Episode,
    cfg: &PipelineConfig,
    lr: f64,
    rng: &RngStream,
) -> Result<MetaLoss> {
    let tokens = state.backbone.num_patches() + 1;
    let (pseudo, full) = layouts(split, ep, tokens, &mut rng.fork(0))?;
    let src = BackboneSource::Current;
    let unc = match needs_uncertainty(cfg) {
        true => Some(layout_uncertainty(state, src, &full, cfg, &rng.fork(4))?),
        false => None,
    };
    let mut outer = state.params.filter_prefix("enc.");
    if cfg.uses_head() {
        let prep = prepare(state, src, &pseudo, cfg, unc.as_ref(), &rng.fork(1))?;
        outer.extend(inner_adapt(state, &prep, &pseudo, cfg, cfg.inner_iters, cfg.inner_lr)?.0);
    }
    let prep = prepare(state, src, &full, cfg, unc.as_ref(), &rng.fork(2))?;

    let vit = state.vit()?;
    let b = &state.backbone;
    let mut tape = Tape::new();
    let bound = outer.bind(&mut tape, |_| true)?;
    let mut rows = Vec::with_capacity(full.images.len());
    let mut drop_rng = rng.fork(3);
    for img in &full.images {
        let p = patchify_image::<T>(img, b.channels, b.height, b.width, b.patch_size)?;
        let pv = tape.constant(p)?;
        rows.push(vit.encode_on_tape(&mut tape, &bound, pv, None, &mut drop_rng, false)?.tokens);
    }
    let h0 = tape.concat_rows(&rows)?;
    let (loss, _) = objective_on_tape(&mut tape, &bound, &state.head, h0, &prep, &full, cfg)?;
    let report = MetaLoss {
        total: tape.scalar_value(loss.total).as_f64(),
        ce: tape.scalar_value(loss.ce).as_f64(),
        sep: tape.scalar_value(loss.sep).as_f64(),
    };
    let mut grads = tape.backward(loss.total)?;
    state.params.accumulate_grads(&bound, &mut grads)?;
    opt.step(&mut state.params, lr)?;
    Ok(report)
}

pub fn meta_train<T: Real>(
    mut state: ModelState<T>,
    train: &Split,
    val: Option<&Split>,
    mt: &MetaTrainConfig,
    cfg: &PipelineConfig,
    rng: &RngStream,
) -> Result<(ModelState<T>, Vec<EpochLog>)> {
    cfg.validate()?;
    if mt.lr < 0.0 {
        return Err(Error::param(format!("meta lr must be non-negative, got {}", mt.lr)));
    }
    let mut opt = MomentumSgd::new(mt.momentum, mt.weight_decay);
    let total = (mt.epochs * mt.tasks_per_epoch).max(1);
    let mut logs = Vec::with_capacity(mt.epochs);
    for epoch in 0..mt.epochs {
        let (mut ce, mut sep) = (0.0, 0.0);
        for task in 0..mt.tasks_per_epoch {
            let t = epoch * mt.tasks_per_epoch + task;
            let r = rng.fork(t as u64);
            let s = mt.shape;
            let ep = sample_episode(train, s.way, s.shot, s.query, &mut r.fork(0))?;
            let lr = 0.5 * mt.lr * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos());
            let l = meta_step(&mut state, &mut opt, train, &ep, cfg, lr, &r.fork(1))?;
            ce += l.ce;
            sep += l.sep;
        }
        let n = mt.tasks_per_epoch.max(1) as f64;
        let (val_acc, ci) = match val {
            Some(v) if mt.val_tasks > 0 => {
                let r = evaluate(
                    &state,
                    BackboneSource::Current,
                    v,
                    mt.shape,
                    mt.val_tasks,
                    cfg,
                    &RngStream::new(rng.seed(), u64::MAX),
                )?;
                (r.mean, r.ci95)
            }
            _ => (f64::NAN, f64::NAN),
        };
        let log = EpochLog {
            epoch,
            loss_ce: ce / n,
            loss_sep: sep / n,
            val_acc,
            ci,
        };
        info!(
            "epoch {}, loss_ce {:.4}, loss_sep {:.4}, val_acc {:.4}, ci {:.4}",
            log.epoch, log.loss_ce, log.loss_sep, log.val_acc, log.ci
        );
        logs.push(log);
    }
    Ok((state, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(classes: usize, per_class: usize) -> Arc<ImageBatch> {
        let (c, h, w) = (1, 8, 8);
        let mut px = Vec::new();
        let mut labels = Vec::new();
        let mut rng = RngStream::new(1, 1);
        for k in 0..classes {
            for _ in 0..per_class {
                for i in 0..h * w {
                    let base = if i % classes == k { 0.9 } else { 0.1 };
                    px.push((base + 0.05 * rng.normal()).clamp(0.0, 1.0) as f32);
                }
                labels.push(k);
            }
        }
        let t = Tensor::new(vec![classes * per_class, c, h, w], px).unwrap();
        Arc::new(ImageBatch::new(t, Some(labels)).unwrap())
    }

    #[test]
    fn episode_sizes_and_determinism() {
        let split = Split::new(toy_data(6, 20), &[0, 1, 2, 3, 4, 5]).unwrap();
        let mut a = RngStream::new(3, 0);
        let mut b = RngStream::new(3, 0);
        let ea = sample_episode(&split, 5, 1, 15, &mut a).unwrap();
        assert_eq!(ea.support.len(), 5);
        assert_eq!(ea.query.len(), 75);
        assert_eq!(ea, sample_episode(&split, 5, 1, 15, &mut b).unwrap());
        let all = sample_episode(&split, 6, 2, 3, &mut a).unwrap();
        let used: BTreeSet<usize> = all.classes.iter().copied().collect();
        assert_eq!(used.len(), 6);
        for s in &all.support {
            assert!(!all.query.iter().any(|q| q.0 == s.0));
        }
        assert!(matches!(sample_episode(&split, 7, 1, 1, &mut a), Err(Error::Dataset(_))));
        assert!(matches!(sample_episode(&split, 5, 10, 11, &mut a), Err(Error::Dataset(_))));
    }

    #[test]
    fn overlapping_pools_rejected() {
        let d = toy_data(4, 2);
        assert!(disjoint_splits(d.clone(), &[vec![0, 1], vec![2, 3]]).is_ok());
        assert!(matches!(
            disjoint_splits(d, &[vec![0, 1], vec![1, 3]]),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn identity_view_and_shapes() {
        let mut rng = RngStream::new(9, 0);
        let img: Vec<f32> = (0..3 * 6 * 5).map(|_| rng.uniform() as f32).collect();
        assert_eq!(apply_view(&img, 3, 6, 5, &ViewParams::identity(3, 6, 5)), img);
        let (a, b) = augment_views(&img, 3, 6, 5, &mut RngStream::new(4, 0));
        assert_eq!(a.len(), img.len());
        assert!(a.iter().chain(&b).all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((a, b), augment_views(&img, 3, 6, 5, &mut RngStream::new(4, 0)));
        for _ in 0..50 {
            let v = ViewParams::draw(3, 32, 32, &mut rng);
            assert!((v.crop_h * v.crop_w) as f64 >= 0.8 * 1024.0);
            assert!(v.top + v.crop_h <= 32 && v.left + v.crop_w <= 32);
        }
    }

    #[test]
    fn separation_examples() {
        let t = |v: &[f64]| Tensor::<f64>::from_rows(&v.iter().map(|&x| vec![x]).collect::<Vec<_>>());
        assert_eq!(separation_penalty(&t(&[0.0, 0.0, 1.0, 1.0]), &[0, 0, 1, 1]).unwrap(), 0.0);
        let v = separation_penalty(&t(&[0.0, 1.0, 3.0, 4.0]), &[0, 0, 1, 1]).unwrap();
        assert!((v - 2.0 / 12.0).abs() < 1e-9);
        assert!(matches!(separation_penalty(&t(&[0.0, 1.0]), &[0, 0]), Err(Error::Parameter(_))));
        let mut tape = Tape::new();
        let e = tape.constant(t(&[0.0, 1.0, 3.0, 4.0])).unwrap();
        let s = separation_penalty_on_tape(&mut tape, e, &[0, 0, 1, 1]).unwrap();
        assert!((tape.scalar_value(s) - 2.0 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn moving_same_class_pair_closer_lowers_penalty() {
        let mut rng = RngStream::new(6, 0);
        let labels = [0, 0, 1, 1, 2];
        let mut e = crate::nn::normal::<f64>(&mut rng, &[5, 3], 1.0);
        let before = separation_penalty(&e, &labels).unwrap();
        // pull row 1 toward row 0 along the line between them
        for k in 0..3 {
            let (a, b) = (e.get2(0, k), e.get2(1, k));
            e.data_mut()[3 + k] = b + 0.5 * (a - b);
        }
        let moved = separation_penalty(&e, &labels).unwrap();
        assert!(moved < before);
    }

    #[test]
    fn classify_examples() {
        let support = Tensor::<f64>::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let q = Tensor::<f64>::from_rows(&[vec![0.0, 0.0, 2.0]]);
        let l = classify(&support, &[0, 1, 2], 3, &q, 0.1).unwrap();
        assert_eq!(accuracy(&l, &[2]), 1.0);
        let same = Tensor::<f64>::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let l = classify(&same, &[0, 1], 2, &Tensor::from_rows(&[vec![0.3, -2.0]]), 0.1).unwrap();
        assert!((l.get2(0, 0) - l.get2(0, 1)).abs() < 1e-12);
        let mut scaled = support.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 7.0);
        let a = classify(&support, &[0, 1, 2], 3, &q, 0.1).unwrap();
        let b = classify(&scaled, &[0, 1, 2], 3, &q, 0.1).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn meta_loss_is_affine_combination() {
        let logits = Tensor::<f64>::from_rows(&[vec![1.0, -1.0], vec![0.2, 0.4]]);
        let emb = Tensor::<f64>::from_rows(&[vec![0.0], vec![1.0], vec![3.0], vec![4.0]]);
        let w = LossWeights { alpha: 0.4, beta: 0.5 };
        let m = meta_loss(&logits, &[0, 1], &emb, &[0, 0, 1, 1], w).unwrap();
        assert!((m.total - (0.4 * m.ce + 0.5 * m.sep)).abs() <= 1e-9);
        let only_ce = meta_loss(&logits, &[0, 1], &emb, &[0, 0, 1, 1], LossWeights { alpha: 0.4, beta: 0.0 }).unwrap();
        assert_eq!(only_ce.total, 0.4 * only_ce.ce);
        let collapsed = Tensor::<f64>::from_rows(&[vec![0.0], vec![0.0], vec![5.0], vec![5.0]]);
        let z = meta_loss(&logits, &[0, 1], &collapsed, &[0, 0, 1, 1], LossWeights { alpha: 0.0, beta: 1.0 }).unwrap();
        assert_eq!(z.total, 0.0);
        assert!(LossWeights { alpha: 0.0, beta: 0.0 }.validate().is_err());
    }

    #[test]
    fn eval_report_ci() {
        let r = EvalReport::from_accuracies(vec![0.5, 1.0, 0.0, 0.5]);
        assert_eq!(r.mean, 0.5);
        let sd = (0.5f64 / 3.0).sqrt();
        assert!((r.ci95 - 1.96 * sd / 2.0).abs() < 1e-12);
    }
}
