//! Line-oriented `key = value` configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use batr_core::batr::{HeadConfig, Stages};
use batr_core::fewshot::{EpisodeShape, LossWeights, MetaTrainConfig, PipelineConfig};
use batr_core::tokengraph::{PairMask, Similarity};
use batr_core::vit::{BackboneConfig, PretrainConfig};
use batr_core::weighting::Combine;
use batr_core::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub dataset: PathBuf,
    pub train_classes: Vec<usize>,
    pub val_classes: Vec<usize>,
    pub test_classes: Vec<usize>,

    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub image_size: usize,
    pub channels: usize,

    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub mask_ratio: f64,
    pub decoder_depth: usize,

    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_momentum: f64,
    pub pretrain_weight_decay: f64,
    pub pretrain_max_steps: usize,

    pub head_heads: usize,
    pub head_ffn_mult: usize,
    pub tau_init: f64,
    pub branch_gain: f64,

    pub similarity: Similarity,
    pub mask_mode: PairMask,
    pub keep_fraction: f64,
    pub clusters: usize,
    pub balance_factor: f64,
    pub k_local: usize,
    pub k_global: usize,
    pub mc_passes: usize,
    pub mc_dropout: f64,
    pub weighting: Option<Combine>,
    pub bilevel: bool,
    pub propagate: bool,

    pub alpha: f64,
    pub beta: f64,
    pub tau_cls: f64,
    pub inner_iters: usize,
    pub inner_lr: f64,
    pub adapt_at_test: bool,

    pub meta_epochs: usize,
    pub meta_tasks: usize,
    pub val_tasks: usize,
    pub meta_lr: f64,
    pub meta_momentum: f64,
    pub meta_weight_decay: f64,

    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub eval_episodes: usize,
    pub ablation_episodes: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            dataset: PathBuf::from("data/synth.bfst"),
            train_classes: (0..10).collect(),
            val_classes: (10..15).collect(),
            test_classes: (15..25).collect(),
            synth_classes: 25,
            synth_per_class: 40,
            image_size: 16,
            channels: 3,
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            ffn_mult: 2,
            dropout: 0.1,
            mask_ratio: 0.75,
            decoder_depth: 1,
            pretrain_epochs: 20,
            pretrain_batch: 16,
            pretrain_lr: 0.05,
            pretrain_momentum: 0.9,
            pretrain_weight_decay: 0.0,
            pretrain_max_steps: 0,
            head_heads: 1,
            head_ffn_mult: 2,
            tau_init: 0.1,
            branch_gain: 0.1,
            similarity: Similarity::Cosine,
            mask_mode: PairMask::SameImage,
            keep_fraction: 0.5,
            clusters: 20,
            balance_factor: 1.3,
            k_local: 20,
            k_global: 20,
            mc_passes: 8,
            mc_dropout: 0.1,
            weighting: Some(Combine::Product),
            bilevel: true,
            propagate: true,
            alpha: 0.4,
            beta: 0.5,
            tau_cls: 0.1,
            inner_iters: 35,
            inner_lr: 0.1,
            adapt_at_test: true,
            meta_epochs: 10,
            meta_tasks: 100,
            val_tasks: 50,
            meta_lr: 0.01,
            meta_momentum: 0.9,
            meta_weight_decay: 0.0,
            way: 5,
            shot: 1,
            query: 15,
            eval_episodes: 1000,
            ablation_episodes: 200,
        }
    }
}

/// Keys that determine tensor names, shapes or their meaning; the
/// checkpoint hash covers exactly these.
const ARCH_KEYS: &[&str] = &[
    "image_size",
    "channels",
    "patch_size",
    "embed_dim",
    "depth",
    "heads",
    "ffn_mult",
    "decoder_depth",
    "head_heads",
    "head_ffn_mult",
];

fn fmt_classes(v: &[usize]) -> String {
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[j] + 1 {
            j += 1;
        }
        out.push(if j > i + 1 {
            format!("{}-{}", v[i], v[j])
        } else if j == i + 1 {
            format!("{},{}", v[i], v[j])
        } else {
            v[i].to_string()
        });
        i = j + 1;
    }
    out.join(",")
}

fn parse_classes(s: &str) -> std::result::Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (num(a.trim())?, num(b.trim())?);
                if a > b {
                    return Err(format!("empty class range `{part}`"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    Ok(out)
}

fn num<N: std::str::FromStr>(s: &str) -> std::result::Result<N, String> {
    s.parse().map_err(|_| format!("`{s}` is not a valid number"))
}

fn boolean(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{s}` is not a boolean")),
    }
}

fn similarity_name(s: Similarity) -> &'static str {
    match s {
        Similarity::Cosine => "cosine",
        Similarity::Dot => "dot",
    }
}

fn mask_name(m: PairMask) -> &'static str {
    match m {
        PairMask::SameImage => "same_image",
        PairMask::None => "none",
        PairMask::Diagonal => "diagonal",
    }
}

fn weighting_name(w: Option<Combine>) -> &'static str {
    match w {
        None => "none",
        Some(Combine::Product) => "product",
        Some(Combine::Uncertainty) => "uncertainty",
        Some(Combine::Synergy) => "synergy",
    }
}

impl Config {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:?}");
        vec![
            ("seed", self.seed.to_string()),
            ("dataset", self.dataset.display().to_string()),
            ("train_classes", fmt_classes(&self.train_classes)),
            ("val_classes", fmt_classes(&self.val_classes)),
            ("test_classes", fmt_classes(&self.test_classes)),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_per_class", self.synth_per_class.to_string()),
            ("image_size", self.image_size.to_string()),
            ("channels", self.channels.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("dropout", f(self.dropout)),
            ("mask_ratio", f(self.mask_ratio)),
            ("decoder_depth", self.decoder_depth.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            ("pretrain_lr", f(self.pretrain_lr)),
            ("pretrain_momentum", f(self.pretrain_momentum)),
            ("pretrain_weight_decay", f(self.pretrain_weight_decay)),
            ("pretrain_max_steps", self.pretrain_max_steps.to_string()),
            ("head_heads", self.head_heads.to_string()),
            ("head_ffn_mult", self.head_ffn_mult.to_string()),
            ("tau_init", f(self.tau_init)),
            ("branch_gain", f(self.branch_gain)),
            ("similarity", similarity_name(self.similarity).into()),
            ("mask_mode", mask_name(self.mask_mode).into()),
            ("keep_fraction", f(self.keep_fraction)),
            ("clusters", self.clusters.to_string()),
            ("balance_factor", f(self.balance_factor)),
            ("k_local", self.k_local.to_string()),
            ("k_global", self.k_global.to_string()),
            ("mc_passes", self.mc_passes.to_string()),
            ("mc_dropout", f(self.mc_dropout)),
            ("weighting", weighting_name(self.weighting).into()),
            ("bilevel", self.bilevel.to_string()),
            ("propagate", self.propagate.to_string()),
            ("alpha", f(self.alpha)),
            ("beta", f(self.beta)),
            ("tau_cls", f(self.tau_cls)),
            ("inner_iters", self.inner_iters.to_string()),
            ("inner_lr", f(self.inner_lr)),
            ("adapt_at_test", self.adapt_at_test.to_string()),
            ("meta_epochs", self.meta_epochs.to_string()),
            ("meta_tasks", self.meta_tasks.to_string()),
            ("val_tasks", self.val_tasks.to_string()),
            ("meta_lr", f(self.meta_lr)),
            ("meta_momentum", f(self.meta_momentum)),
            ("meta_weight_decay", f(self.meta_weight_decay)),
            ("way", self.way.to_string()),
            ("shot", self.shot.to_string()),
            ("query", self.query.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("ablation_episodes", self.ablation_episodes.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = num(v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "train_classes" => self.train_classes = parse_classes(v)?,
            "val_classes" => self.val_classes = parse_classes(v)?,
            "test_classes" => self.test_classes = parse_classes(v)?,
            "synth_classes" => self.synth_classes = num(v)?,
            "synth_per_class" => self.synth_per_class = num(v)?,
            "image_size" => self.image_size = num(v)?,
            "channels" => self.channels = num(v)?,
            "patch_size" => self.patch_size = num(v)?,
            "embed_dim" => self.embed_dim = num(v)?,
            "depth" => self.depth = num(v)?,
            "heads" => self.heads = num(v)?,
            "ffn_mult" => self.ffn_mult = num(v)?,
            "dropout" => self.dropout = num(v)?,
            "mask_ratio" => self.mask_ratio = num(v)?,
            "decoder_depth" => self.decoder_depth = num(v)?,
            "pretrain_epochs" => self.pretrain_epochs = num(v)?,
            "pretrain_batch" => self.pretrain_batch = num(v)?,
            "pretrain_lr" => self.pretrain_lr = num(v)?,
            "pretrain_momentum" => self.pretrain_momentum = num(v)?,
            "pretrain_weight_decay" => self.pretrain_weight_decay = num(v)?,
            "pretrain_max_steps" => self.pretrain_max_steps = num(v)?,
            "head_heads" => self.head_heads = num(v)?,
            "head_ffn_mult" => self.head_ffn_mult = num(v)?,
            "tau_init" => self.tau_init = num(v)?,
            "branch_gain" => self.branch_gain = num(v)?,
            "similarity" => {
                self.similarity = match v {
                    "cosine" => Similarity::Cosine,
                    "dot" => Similarity::Dot,
                    _ => return Err(format!("similarity must be cosine or dot, got `{v}`")),
                }
            }
            "mask_mode" => {
                self.mask_mode = match v {
                    "same_image" => PairMask::SameImage,
                    "none" => PairMask::None,
                    "diagonal" => PairMask::Diagonal,
                    _ => return Err(format!("mask_mode must be same_image, none or diagonal, got `{v}`")),
                }
            }
            "keep_fraction" => self.keep_fraction = num(v)?,
            "clusters" => self.clusters = num(v)?,
            "balance_factor" => self.balance_factor = num(v)?,
            "k_local" => self.k_local = num(v)?,
            "k_global" => self.k_global = num(v)?,
            "mc_passes" => self.mc_passes = num(v)?,
            "mc_dropout" => self.mc_dropout = num(v)?,
            "weighting" => {
                self.weighting = match v {
                    "none" => None,
                    "product" => Some(Combine::Product),
                    "uncertainty" => Some(Combine::Uncertainty),
                    "synergy" => Some(Combine::Synergy),
                    _ => return Err(format!("weighting must be product, uncertainty, synergy or none, got `{v}`")),
                }
            }
            "bilevel" => self.bilevel = boolean(v)?,
            "propagate" => self.propagate = boolean(v)?,
            "alpha" => self.alpha = num(v)?,
            "beta" => self.beta = num(v)?,
            "tau_cls" => self.tau_cls = num(v)?,
            "inner_iters" => self.inner_iters = num(v)?,
            "inner_lr" => self.inner_lr = num(v)?,
            "adapt_at_test" => self.adapt_at_test = boolean(v)?,
            "meta_epochs" => self.meta_epochs = num(v)?,
            "meta_tasks" => self.meta_tasks = num(v)?,
            "val_tasks" => self.val_tasks = num(v)?,
            "meta_lr" => self.meta_lr = num(v)?,
            "meta_momentum" => self.meta_momentum = num(v)?,
            "meta_weight_decay" => self.meta_weight_decay = num(v)?,
            "way" => self.way = num(v)?,
            "shot" => self.shot = num(v)?,
            "query" => self.query = num(v)?,
            "eval_episodes" => self.eval_episodes = num(v)?,
            "ablation_episodes" => self.ablation_episodes = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Defaults overridden by the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(Some(line_no), format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(Some(line_no), format!("key `{key}` set twice")));
            }
            cfg.set(key, value.trim()).map_err(|m| Error::config(Some(line_no), m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { line, msg } => Error::config(line, format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 over the architecture keys, hex encoded.
    pub fn arch_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if ARCH_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(None, m));
        self.backbone().validate().map_err(|e| Error::config(None, e.to_string()))?;
        self.head().validate().map_err(|e| Error::config(None, e.to_string()))?;
        self.pipeline().validate().map_err(|e| Error::config(None, e.to_string()))?;
        if self.synth_classes < 5 {
            return bad(format!("synth_classes must be at least 5, got {}", self.synth_classes));
        }
        if self.synth_per_class == 0 || self.pretrain_batch == 0 {
            return bad("synth_per_class and pretrain_batch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.pretrain_momentum) || !(0.0..1.0).contains(&self.meta_momentum) {
            return bad("momentum must be in [0,1)".into());
        }
        if self.pretrain_lr <= 0.0 || self.meta_lr < 0.0 || self.pretrain_weight_decay < 0.0 || self.meta_weight_decay < 0.0 {
            return bad("learning rates and weight decay must be non-negative (pretrain_lr positive)".into());
        }
        if self.way < 2 || self.shot == 0 || self.query == 0 {
            return bad(format!("episodes need way >= 2, shot >= 1, query >= 1; got {}/{}/{}", self.way, self.shot, self.query));
        }
        if self.eval_episodes == 0 || self.ablation_episodes == 0 {
            return bad("eval_episodes and ablation_episodes must be positive".into());
        }
        let pools = [&self.train_classes, &self.val_classes, &self.test_classes];
        for (a, pa) in pools.iter().enumerate() {
            for pb in &pools[a + 1..] {
                if let Some(c) = pa.iter().find(|c| pb.contains(c)) {
                    return bad(format!("class {c} is in more than one class pool"));
                }
            }
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            height: self.image_size,
            width: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            dropout_rate: self.dropout,
            mask_ratio: self.mask_ratio,
            decoder_depth: self.decoder_depth,
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            dim: self.embed_dim,
            heads: self.head_heads,
            ffn_mult: self.head_ffn_mult,
            tau_init: self.tau_init,
            branch_gain: self.branch_gain,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            momentum: self.pretrain_momentum,
            weight_decay: self.pretrain_weight_decay,
            max_steps: (self.pretrain_max_steps > 0).then_some(self.pretrain_max_steps),
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            similarity: self.similarity,
            pair_mask: self.mask_mode,
            keep_fraction: self.keep_fraction,
            clusters: self.clusters,
            balance_factor: self.balance_factor,
            k_local: self.k_local,
            k_global: self.k_global,
            mc_passes: self.mc_passes,
            mc_rate: self.mc_dropout,
            weighting: self.weighting,
            stages: Stages {
                bilevel: self.bilevel,
                propagate: self.propagate,
            },
            tau_cls: self.tau_cls,
            loss: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
            },
            inner_iters: self.inner_iters,
            inner_lr: self.inner_lr,
            adapt: self.adapt_at_test,
        }
    }

    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape {
            way: self.way,
            shot: self.shot,
            query: self.query,
        }
    }

    pub fn meta_train(&self) -> MetaTrainConfig {
        MetaTrainConfig {
            epochs: self.meta_epochs,
            tasks_per_epoch: self.meta_tasks,
            val_tasks: self.val_tasks,
            shape: self.shape(),
            lr: self.meta_lr,
            momentum: self.meta_momentum,
            weight_decay: self.meta_weight_decay,
        }
    }
}
