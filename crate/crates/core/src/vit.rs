//! Mini vision transformer backbone and masked-image-modeling pretraining.

use log::info;

use crate::error::{Error, Result};
use crate::nn::{self, AttnOpts, BlockNames, Scale, Stochastic};
use crate::numcore::{Bound, MomentumSgd, ParamStore, Real, RngStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout_rate: f64,
    pub mask_ratio: f64,
    pub decoder_depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            height: 32,
            width: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            ffn_mult: 4,
            dropout_rate: 0.1,
            mask_ratio: 0.75,
            decoder_depth: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::dim(
                "backbone",
                &[self.height, self.width],
                &[self.patch_size, self.patch_size],
            ));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::param(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::param(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::param(format!("mask_ratio must be in (0,1), got {}", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::param(format!("dropout_rate must be in [0,1), got {}", self.dropout_rate)));
        }
        if self.depth == 0 || self.ffn_mult == 0 {
            return Err(Error::param("depth and ffn_mult must be positive"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }
}

/// `B×C×H×W` pixels in `[0,1]` with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pixels: Tensor<f32>,
    labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        let [b, c, _, _] = pixels.shape() else {
            return Err(Error::dim("image_batch", pixels.shape(), &[0, 0, 0, 0]));
        };
        if !matches!(c, 1 | 3) {
            return Err(Error::param(format!("channels must be 1 or 3, got {c}")));
        }
        if let Some(l) = &labels {
            if l.len() != *b {
                return Err(Error::dim("image_batch", pixels.shape(), &[l.len()]));
            }
        }
        if pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::param("pixel values must lie in [0,1]"));
        }
        Ok(ImageBatch { pixels, labels })
    }

    pub fn from_images(images: &[&[f32]], channels: usize, height: usize, width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * channels * height * width);
        for im in images {
            data.extend_from_slice(im);
        }
        let t = Tensor::new(vec![images.len(), channels, height, width], data)?;
        ImageBatch::new(t, None)
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let (c, h, w) = self.dims();
        let n = c * h * w;
        &self.pixels.data()[i * n..(i + 1) * n]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }
}

/// Flattens one `C×H×W` image into `L × (p²·C)` rows in raster order. Each row
/// is channel-major, then row-major inside the patch.
pub fn patchify_image<T: Real>(img: &[f32], c: usize, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim("patchify", &[h, w], &[p, p]));
    }
    if img.len() != c * h * w {
        return Err(Error::dim("patchify", &[c, h, w], &[img.len()]));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (gy * p + dy, gx * p + dx);
                        out.push(T::of(img[(ch * h + y) * w + x] as f64));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// Per-image patch matrices for a batch.
pub fn patchify<T: Real>(batch: &ImageBatch, p: usize) -> Result<Vec<Tensor<T>>> {
    let (c, h, w) = batch.dims();
    (0..batch.len()).map(|i| patchify_image(batch.image(i), c, h, w, p)).collect()
}

/// Inverse of [`patchify_image`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, c: usize, h: usize, w: usize, p: usize) -> Result<Vec<f32>> {
    let (gh, gw) = (h / p, w / p);
    if patches.shape() != [gh * gw, p * p * c] {
        return Err(Error::dim("unpatchify", patches.shape(), &[gh * gw, p * p * c]));
    }
    let mut img = vec![0f32; c * h * w];
    let mut it = patches.data().iter();
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (gy * p + dy, gx * p + dx);
                        img[(ch * h + y) * w + x] = it.next().expect("sized above").as_f64() as f32;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Set of masked token positions. Positions are token indices `1..=L`, so
/// the class token (index 0) can never be part of a plan.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    masked: Vec<usize>,
    num_patches: usize,
}

impl MaskPlan {
    /// Masks `round(ratio·L)` patches chosen uniformly.
    pub fn random(num_patches: usize, ratio: f64, rng: &mut RngStream) -> Self {
        let k = ((ratio * num_patches as f64).round() as usize).min(num_patches);
        let mut masked: Vec<usize> = rng.sample_indices(num_patches, k).into_iter().map(|i| i + 1).collect();
        masked.sort_unstable();
        MaskPlan { masked, num_patches }
    }

    pub fn from_indices(mut masked: Vec<usize>, num_patches: usize) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if let Some(&bad) = masked.iter().find(|&&i| i == 0 || i > num_patches) {
            return Err(Error::param(format!(
                "mask index {bad} outside patch tokens 1..={num_patches}"
            )));
        }
        Ok(MaskPlan { masked, num_patches })
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.num_patches as f64
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }
}

/// Encoder output for one image: row 0 is the class token, rows `1..=L`
/// are patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T: Real = f32> {
    pub tokens: Tensor<T>,
    pub image_id: usize,
    pub view_id: usize,
}

impl<T: Real> TokenSet<T> {
    pub fn cls(&self) -> &[T] {
        self.tokens.row(0)
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Encoder activations captured on a tape.
pub struct Encoded {
    pub tokens: Var,
    /// One attention matrix per (block, head), block-major.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Vit {
    cfg: BackboneConfig,
}

impl Vit {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Vit { cfg })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn enc_block(i: usize) -> BlockNames {
        BlockNames::new(&format!("enc.blk{i}"), true)
    }

    fn dec_block(i: usize) -> BlockNames {
        BlockNames::new(&format!("dec.blk{i}"), true)
    }

    /// Fresh encoder (`enc.*`) and decoder (`dec.*`) parameters.
    pub fn init_params<T: Real>(&self, rng: &mut RngStream) -> ParamStore<T> {
        let c = &self.cfg;
        let (d, l, pd) = (c.embed_dim, c.num_patches(), c.patch_dim());
        let mut s = ParamStore::new();
        s.insert("enc.patch.w", nn::xavier(rng, pd, d, 1.0));
        s.insert("enc.patch.b", Tensor::zeros(&[1, d]));
        s.insert("enc.cls", nn::normal(rng, &[1, d], 0.02));
        s.insert("enc.pos", nn::normal(rng, &[l + 1, d], 0.02));
        s.insert("enc.mask_token", nn::normal(rng, &[1, d], 0.02));
        for i in 0..c.depth {
            Self::enc_block(i).init(&mut s, d, d * c.ffn_mult, 1.0, rng);
        }
        s.insert("enc.norm.g", Tensor::full(&[1, d], T::one()));
        s.insert("enc.norm.b", Tensor::zeros(&[1, d]));

        s.insert("dec.embed.w", nn::xavier(rng, d, d, 1.0));
        s.insert("dec.embed.b", Tensor::zeros(&[1, d]));
        s.insert("dec.pos", nn::normal(rng, &[l + 1, d], 0.02));
        for i in 0..c.decoder_depth {
            Self::dec_block(i).init(&mut s, d, d * c.ffn_mult, 1.0, rng);
        }
        s.insert("dec.norm.g", Tensor::full(&[1, d], T::one()));
        s.insert("dec.norm.b", Tensor::zeros(&[1, d]));
        s.insert("dec.pred.w", nn::xavier(rng, d, pd, 1.0));
        s.insert("dec.pred.b", Tensor::zeros(&[1, pd]));
        s
    }

    /// Runs the encoder on one patch matrix (`L × patch_dim`) already on the
    /// tape. With a plan, masked patch embeddings are replaced by the shared
    /// mask token before positional embeddings are added.
    pub fn encode_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        patches: Var,
        plan: Option<&MaskPlan>,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<Encoded> {
        let c = &self.cfg;
        let l = c.num_patches();
        if tape.shape(patches) != [l, c.patch_dim()] {
            return Err(Error::dim("encode", &tape.shape(patches), &[l, c.patch_dim()]));
        }
        let mut emb = nn::linear(tape, patches, bound.get("enc.patch.w")?, Some(bound.get("enc.patch.b")?))?;
        if let Some(plan) = plan {
            if plan.num_patches() != l {
                return Err(Error::param(format!(
                    "mask plan covers {} patches, model has {l}",
                    plan.num_patches()
                )));
            }
            let mut keep = vec![T::one(); l * c.embed_dim];
            let mut hit = vec![T::zero(); l];
            for &t in plan.masked() {
                hit[t - 1] = T::one();
                keep[(t - 1) * c.embed_dim..t * c.embed_dim].fill(T::zero());
            }
            emb = tape.mul_const(emb, keep)?;
            let col = tape.constant(Tensor::new(vec![l, 1], hit)?)?;
            let fill = tape.matmul(col, bound.get("enc.mask_token")?)?;
            emb = tape.add(emb, fill)?;
        }
        let x = tape.concat_rows(&[bound.get("enc.cls")?, emb])?;
        let mut x = tape.add(x, bound.get("enc.pos")?)?;
        let dh = c.embed_dim / c.heads;
        let opts = AttnOpts::plain(c.heads, Scale::Const(1.0 / (dh as f64).sqrt()));
        let mut attention = Vec::new();
        for i in 0..c.depth {
            let drop = Stochastic {
                rate: c.dropout_rate,
                training,
                rng,
            };
            let (y, maps) = nn::block(tape, bound, &Self::enc_block(i), x, &opts, Some(drop))?;
            x = y;
            attention.extend(maps);
        }
        let tokens = nn::layer_norm(tape, x, bound.get("enc.norm.g")?, bound.get("enc.norm.b")?)?;
        Ok(Encoded { tokens, attention })
    }

    /// Pixel predictions `(L+1) × patch_dim`; row 0 (class token) is unused.
    pub fn decode_on_tape<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, tokens: Var) -> Result<Var> {
        let c = &self.cfg;
        let mut x = nn::linear(tape, tokens, bound.get("dec.embed.w")?, Some(bound.get("dec.embed.b")?))?;
        x = tape.add(x, bound.get("dec.pos")?)?;
        let dh = c.embed_dim / c.heads;
        let opts = AttnOpts::plain(c.heads, Scale::Const(1.0 / (dh as f64).sqrt()));
        for i in 0..c.decoder_depth {
            x = nn::block(tape, bound, &Self::dec_block(i), x, &opts, None)?.0;
        }
        let x = nn::layer_norm(tape, x, bound.get("dec.norm.g")?, bound.get("dec.norm.b")?)?;
        nn::linear(tape, x, bound.get("dec.pred.w")?, Some(bound.get("dec.pred.b")?))
    }

    /// Token sets for every image of a batch, outside any gradient tape.
    pub fn encode<T: Real>(
        &self,
        params: &ParamStore<T>,
        batch: &ImageBatch,
        plan: Option<&MaskPlan>,
        rng: &RngStream,
        training: bool,
    ) -> Result<Vec<TokenSet<T>>> {
        let patches = patchify::<T>(batch, self.cfg.patch_size)?;
        let enc = params.filter_prefix("enc.");
        patches
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut tape = Tape::new();
                let bound = enc.bind(&mut tape, |_| false)?;
                let pv = tape.constant(p)?;
                let mut r = rng.fork(i as u64);
                let out = self.encode_on_tape(&mut tape, &bound, pv, plan, &mut r, training)?;
                Ok(TokenSet {
                    tokens: tape.value(out.tokens).clone(),
                    image_id: i,
                    view_id: 0,
                })
            })
            .collect()
    }

    /// Encoder attention maps (block-major, then head) for one image.
    pub fn attention_maps<T: Real>(&self, params: &ParamStore<T>, image: &[f32]) -> Result<Vec<Tensor<T>>> {
        let c = &self.cfg;
        let p = patchify_image::<T>(image, c.channels, c.height, c.width, c.patch_size)?;
        let mut tape = Tape::new();
        let bound = params.filter_prefix("enc.").bind(&mut tape, |_| false)?;
        let pv = tape.constant(p)?;
        let mut rng = RngStream::new(0, 0);
        let out = self.encode_on_tape(&mut tape, &bound, pv, None, &mut rng, false)?;
        Ok(out.attention.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Masked-patch reconstruction loss for one image on the tape.
    pub fn mim_loss_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        patches: &Tensor<T>,
        plan: &MaskPlan,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<Var> {
        if plan.is_empty() {
            return Err(Error::param("mask plan is empty; loss divides by |M|"));
        }
        let pv = tape.constant(patches.clone())?;
        let enc = self.encode_on_tape(tape, bound, pv, Some(plan), rng, training)?;
        let pred = self.decode_on_tape(tape, bound, enc.tokens)?;
        masked_reconstruction_loss(tape, pred, pv, plan)
    }

    /// Mean masked reconstruction loss over a batch with one plan per image.
    pub fn mim_loss<T: Real>(
        &self,
        params: &ParamStore<T>,
        batch: &ImageBatch,
        plans: &[MaskPlan],
        rng: &RngStream,
    ) -> Result<f64> {
        let patches = patchify::<T>(batch, self.cfg.patch_size)?;
        if plans.len() != patches.len() {
            return Err(Error::dim("mim_loss", &[patches.len()], &[plans.len()]));
        }
        let mut total = 0.0;
        for (i, (p, plan)) in patches.iter().zip(plans).enumerate() {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| false)?;
            let mut r = rng.fork(i as u64);
            let l = self.mim_loss_on_tape(&mut tape, &bound, p, plan, &mut r, false)?;
            total += tape.scalar_value(l).as_f64();
        }
        Ok(total / patches.len() as f64)
    }
}

/// `(1/|M|) Σ_{p∈M} mean_pixels (x_p − x̂_p)²`.
///
/// `pred` is `(L+1) × P` (row 0 ignored), `target` is `L × P`.
pub fn masked_reconstruction_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, plan: &MaskPlan) -> Result<Var> {
    if plan.is_empty() {
        return Err(Error::param("mask plan is empty; loss divides by |M|"));
    }
    let p = tape.gather_rows(pred, plan.masked())?;
    let idx: Vec<usize> = plan.masked().iter().map(|t| t - 1).collect();
    let t = tape.gather_rows(target, &idx)?;
    tape.mse(p, t)
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Stop after this many optimizer steps (cosine schedule spans them).
    pub max_steps: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub steps: usize,
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// MIM pretraining with momentum SGD and cosine learning-rate decay.
/// Returns the trained encoder and decoder parameters.
pub fn pretrain<T: Real>(
    vit: &Vit,
    mut params: ParamStore<T>,
    data: &ImageBatch,
    cfg: &PretrainConfig,
    rng: &RngStream,
) -> Result<(ParamStore<T>, PretrainReport)> {
    if data.is_empty() {
        return Err(Error::dataset("pretraining set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::param("batch_size must be positive"));
    }
    let bc = vit.config();
    let (c, h, w) = data.dims();
    if (c, h, w) != (bc.channels, bc.height, bc.width) {
        return Err(Error::dataset(format!(
            "images are {c}x{h}x{w}, backbone expects {}x{}x{}",
            bc.channels, bc.height, bc.width
        )));
    }
    let patches = patchify::<T>(data, bc.patch_size)?;
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.max_steps.unwrap_or(usize::MAX).min(per_epoch * cfg.epochs);
    let mut opt = MomentumSgd::new(cfg.momentum, cfg.weight_decay);
    let mut report = PretrainReport::default();

    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.fork(epoch as u64).shuffle(&mut order);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if report.steps >= total {
                break 'outer;
            }
            let step = report.steps;
            let mut step_rng = rng.fork(1_000_000 + step as u64);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| true)?;
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let plan = MaskPlan::random(bc.num_patches(), bc.mask_ratio, &mut step_rng);
                losses.push(vit.mim_loss_on_tape(&mut tape, &bound, &patches[i], &plan, &mut step_rng, true)?);
            }
            let stacked = tape.concat_rows(&losses)?;
            let loss = tape.mean(stacked)?;
            let value = tape.scalar_value(loss).as_f64();
            let mut grads = tape.backward(loss)?;
            params.accumulate_grads(&bound, &mut grads)?;
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            opt.step(&mut params, lr)?;
            report.steps += 1;
            report.step_losses.push(value);
            epoch_sum += value;
            epoch_batches += 1;
        }
        if epoch_batches > 0 {
            let mean = epoch_sum / epoch_batches as f64;
            info!("pretrain epoch {epoch}: mim loss {mean:.5}");
            report.epoch_losses.push(mean);
        }
    }
    params.iter_mut().for_each(|(_, t)| {
        t.requires_grad = false;
        t.grad = None;
    });
    Ok((params, report))
}
