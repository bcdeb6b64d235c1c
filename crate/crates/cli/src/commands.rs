//! Subcommand implementations. Each returns its report so tests can drive
//! the same code paths as the binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use batr_core::batr::{self, Stages};
use batr_core::fewshot::{
    self, BackboneSource, EpisodeShape, EpochLog, EvalReport, Layout, ModelState, PipelineConfig, Split,
};
use batr_core::numcore::{ParamStore, RngStream, Tape, Tensor};
use batr_core::tokengraph;
use batr_core::vit::{self, ImageBatch, PretrainReport, Vit};
use batr_core::{Error, Result};
use log::{info, warn};

use crate::config::Config;
use crate::formats::{self, Checkpoint};
use crate::synth;

/// Stream ids, one per command, so commands never share draws.
mod stream {
    pub const SYNTH_CLASSES: u64 = 1;
    pub const SYNTH_IMAGES: u64 = 2;
    pub const PRETRAIN_INIT: u64 = 10;
    pub const PRETRAIN: u64 = 11;
    pub const HEAD_INIT: u64 = 20;
    pub const META: u64 = 21;
    pub const EVAL: u64 = 30;
    pub const INSPECT: u64 = 40;
}

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub images: usize,
    pub centroid_accuracy: f64,
    pub manifest: PathBuf,
}

pub fn cmd_synth(cfg: &Config, out: &Path) -> Result<SynthSummary> {
    let (c, s) = (cfg.channels, cfg.image_size);
    let classes = synth::draw_classes(cfg.synth_classes, c, &mut RngStream::new(cfg.seed, stream::SYNTH_CLASSES));
    let data = synth::generate(&classes, cfg.synth_per_class, c, s, s, &RngStream::new(cfg.seed, stream::SYNTH_IMAGES))?;
    let acc = synth::centroid_accuracy(&classes, &data);
    formats::save_dataset(out, &data)?;
    let manifest = synth::manifest_path(out);
    synth::write_manifest(&manifest, &classes, cfg.seed, acc)?;
    info!("wrote {} images of {} classes to {}", data.len(), classes.len(), out.display());
    Ok(SynthSummary {
        images: data.len(),
        centroid_accuracy: acc,
        manifest,
    })
}

/// Loads the dataset named by the config and checks it against the backbone.
pub fn load_data(cfg: &Config) -> Result<Arc<ImageBatch>> {
    let data = formats::load_dataset(&cfg.dataset)?;
    let (c, h, w) = data.dims();
    if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size) {
        return Err(Error::dataset(format!(
            "{}: images are {c}x{h}x{w}, config expects {}x{s}x{s}",
            cfg.dataset.display(),
            cfg.channels,
            s = cfg.image_size
        )));
    }
    Ok(Arc::new(data))
}

/// Images whose label is in `classes`, labels preserved.
pub fn subset(data: &ImageBatch, classes: &[usize]) -> Result<ImageBatch> {
    let labels = data.labels().ok_or_else(|| Error::dataset("dataset has no labels"))?;
    let idx: Vec<usize> = (0..data.len()).filter(|&i| classes.contains(&labels[i])).collect();
    if idx.is_empty() {
        return Err(Error::dataset(format!("no images for classes {classes:?}")));
    }
    let (c, h, w) = data.dims();
    let pixels = Tensor::new(vec![data.len(), c * h * w], data.pixels().data().to_vec())?.select_rows(&idx);
    let pixels = pixels.reshape(vec![idx.len(), c, h, w])?;
    ImageBatch::new(pixels, Some(idx.iter().map(|&i| labels[i]).collect()))
}

pub struct Splits {
    pub train: Split,
    pub val: Option<Split>,
    pub test: Split,
}

pub fn splits(cfg: &Config, data: Arc<ImageBatch>) -> Result<Splits> {
    let pools = vec![cfg.train_classes.clone(), cfg.val_classes.clone(), cfg.test_classes.clone()];
    let nonempty: Vec<Vec<usize>> = pools.iter().filter(|p| !p.is_empty()).cloned().collect();
    fewshot::disjoint_splits(data.clone(), &nonempty)?;
    let split = |p: &[usize]| Split::new(data.clone(), p);
    Ok(Splits {
        train: split(&cfg.train_classes)?,
        val: if cfg.val_classes.is_empty() {
            None
        } else {
            Some(split(&cfg.val_classes)?)
        },
        test: split(&cfg.test_classes)?,
    })
}

pub fn cmd_pretrain(cfg: &Config, out: &Path) -> Result<PretrainReport> {
    let data = load_data(cfg)?;
    let train = subset(&data, &cfg.train_classes)?;
    let vit = Vit::new(cfg.backbone())?;
    let init = vit.init_params::<f32>(&mut RngStream::new(cfg.seed, stream::PRETRAIN_INIT));
    let (params, report) = vit::pretrain(&vit, init, &train, &cfg.pretrain(), &RngStream::new(cfg.seed, stream::PRETRAIN))?;
    Checkpoint {
        config_hash: cfg.arch_hash(),
        seed: cfg.seed,
        params,
    }
    .save(out)?;
    if let (Some(first), Some(last)) = (report.step_losses.first(), report.step_losses.last()) {
        info!("pretrained {} steps, loss {first:.5} -> {last:.5}", report.steps);
    }
    Ok(report)
}

/// Model state from a checkpoint. A checkpoint without a refinement head
/// gets a freshly initialised one on top of its encoder.
pub fn load_state(cfg: &Config, path: &Path, allow_mismatch: bool) -> Result<ModelState<f32>> {
    let ck = Checkpoint::load(path, &cfg.arch_hash(), allow_mismatch)?;
    let has_head = ck.params.names().any(|n| n.starts_with(batr::PREFIX));
    let state = if has_head {
        ModelState {
            backbone: cfg.backbone(),
            head: cfg.head(),
            params: ck.params,
        }
    } else {
        let mut rng = RngStream::new(cfg.seed, stream::HEAD_INIT);
        ModelState::from_pretrained(cfg.backbone(), cfg.head(), &ck.params, &mut rng)?
    };
    check_shapes(cfg, &state.params, path)?;
    Ok(state)
}

/// Every expected tensor is present with the shape the config implies.
fn check_shapes(cfg: &Config, params: &ParamStore<f32>, path: &Path) -> Result<()> {
    let vit = Vit::new(cfg.backbone())?;
    let mut want = vit.init_params::<f32>(&mut RngStream::new(0, 0)).filter_prefix("enc.");
    want.extend(batr::init_params::<f32>(&cfg.head(), &mut RngStream::new(0, 0))?);
    for (name, t) in want.iter() {
        match params.get(name) {
            Ok(have) if have.shape() == t.shape() => {}
            Ok(have) => {
                return Err(Error::checkpoint(
                    path,
                    format!("tensor `{name}` has shape {:?}, config implies {:?}", have.shape(), t.shape()),
                ))
            }
            Err(_) => return Err(Error::checkpoint(path, format!("missing tensor `{name}`"))),
        }
    }
    Ok(())
}

pub fn metrics_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".metrics");
    PathBuf::from(s)
}

pub fn cmd_meta_finetune(cfg: &Config, checkpoint: &Path, out: &Path, allow_mismatch: bool) -> Result<Vec<EpochLog>> {
    let state = load_state(cfg, checkpoint, allow_mismatch)?;
    let sp = splits(cfg, load_data(cfg)?)?;
    let rng = RngStream::new(cfg.seed, stream::META);
    let (state, logs) = fewshot::meta_train(state, &sp.train, sp.val.as_ref(), &cfg.meta_train(), &cfg.pipeline(), &rng)?;
    Checkpoint {
        config_hash: cfg.arch_hash(),
        seed: cfg.seed,
        params: state.params,
    }
    .save(out)?;
    let mut text = String::from("epoch\tloss_ce\tloss_sep\tval_acc\tci95\n");
    for l in &logs {
        let _ = writeln!(text, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", l.epoch, l.loss_ce, l.loss_sep, l.val_acc, l.ci);
    }
    let mp = metrics_path(out);
    std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
    Ok(logs)
}

pub fn cmd_eval(
    cfg: &Config,
    checkpoint: &Path,
    shape: EpisodeShape,
    episodes: usize,
    allow_mismatch: bool,
) -> Result<EvalReport> {
    let state = load_state(cfg, checkpoint, allow_mismatch)?;
    let sp = splits(cfg, load_data(cfg)?)?;
    let rng = RngStream::new(cfg.seed, stream::EVAL);
    fewshot::evaluate(&state, BackboneSource::Current, &sp.test, shape, episodes, &cfg.pipeline(), &rng)
}

pub fn format_accuracy(shape: EpisodeShape, episodes: usize, r: &EvalReport) -> String {
    format!(
        "{}-way {}-shot over {episodes} episodes: {:.2} ± {:.2}",
        shape.way,
        shape.shot,
        100.0 * r.mean,
        100.0 * r.ci95
    )
}

/// One ablation configuration.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub id: &'static str,
    pub name: &'static str,
    pub source: BackboneSource,
    pub pipeline: PipelineConfig,
}

/// Rows (I) to (V): each adds one component to the previous.
pub fn ablation_rows(cfg: &Config) -> Vec<AblationRow> {
    let full = cfg.pipeline();
    let with = |bilevel, propagate, weighting| PipelineConfig {
        stages: Stages { bilevel, propagate },
        weighting,
        ..full.clone()
    };
    vec![
        AblationRow {
            id: "I",
            name: "pretrained backbone, prototypes",
            source: BackboneSource::Pretrained,
            pipeline: with(false, false, None),
        },
        AblationRow {
            id: "II",
            name: "+ meta-finetuning",
            source: BackboneSource::Current,
            pipeline: with(false, false, None),
        },
        AblationRow {
            id: "III",
            name: "+ bi-level attention",
            source: BackboneSource::Current,
            pipeline: with(true, false, None),
        },
        AblationRow {
            id: "IV",
            name: "+ graph propagation",
            source: BackboneSource::Current,
            pipeline: with(true, true, None),
        },
        AblationRow {
            id: "V",
            name: "full (+ importance weighting)",
            source: BackboneSource::Current,
            pipeline: full.clone(),
        },
    ]
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub row: AblationRow,
    pub one_shot: EvalReport,
    pub five_shot: EvalReport,
}

pub fn cmd_ablate(
    cfg: &Config,
    checkpoint: &Path,
    episodes: (usize, usize),
    allow_mismatch: bool,
) -> Result<Vec<AblationResult>> {
    let state = load_state(cfg, checkpoint, allow_mismatch)?;
    let sp = splits(cfg, load_data(cfg)?)?;
    let rng = RngStream::new(cfg.seed, stream::EVAL);
    let shape = |shot| EpisodeShape {
        way: cfg.way,
        shot,
        query: cfg.query,
    };
    ablation_rows(cfg)
        .into_iter()
        .map(|row| {
            let one = fewshot::evaluate(&state, row.source, &sp.test, shape(1), episodes.0, &row.pipeline, &rng)?;
            let five = fewshot::evaluate(&state, row.source, &sp.test, shape(5), episodes.1, &row.pipeline, &rng)?;
            info!("ablation {}: 1-shot {:.4}, 5-shot {:.4}", row.id, one.mean, five.mean);
            Ok(AblationResult {
                row,
                one_shot: one,
                five_shot: five,
            })
        })
        .collect()
}

pub fn format_ablation(rows: &[AblationResult]) -> String {
    let mut out = format!("{:<5} {:<32} {:>15} {:>15}\n", "row", "configuration", "1-shot", "5-shot");
    for r in rows {
        let cell = |e: &EvalReport| format!("{:.2} ± {:.2}", 100.0 * e.mean, 100.0 * e.ci95);
        let _ = writeln!(
            out,
            "{:<5} {:<32} {:>15} {:>15}",
            r.row.id,
            r.row.name,
            cell(&r.one_shot),
            cell(&r.five_shot)
        );
    }
    out
}

/// Files written by `inspect`.
#[derive(Clone, Debug)]
pub struct InspectReport {
    pub files: Vec<PathBuf>,
    pub heatmap: Vec<u8>,
    pub grid: (usize, usize),
}

pub fn write_matrix<T: batr_core::numcore::Real>(path: &Path, m: &Tensor<T>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{:.6}", v.as_f64())).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary PGM of `weights` (row-major, `h×w`) mapped linearly from [0,1].
pub fn pgm(weights: &[f64], h: usize, w: usize) -> (Vec<u8>, Vec<u8>) {
    let pixels: Vec<u8> = weights.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    (bytes, pixels)
}

/// Attention matrices of every stage, embedding norms and the importance
/// heatmap of dataset image `image`, treated as a one-image episode.
pub fn cmd_inspect(
    cfg: &Config,
    checkpoint: &Path,
    image: usize,
    out_dir: &Path,
    allow_mismatch: bool,
) -> Result<InspectReport> {
    let state = load_state(cfg, checkpoint, allow_mismatch)?;
    let data = load_data(cfg)?;
    if image >= data.len() {
        return Err(Error::dataset(format!("image {image} out of range ({} images)", data.len())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut emit = |name: String, m: &Tensor<f32>| -> Result<()> {
        let p = out_dir.join(name);
        write_matrix(&p, m)?;
        files.push(p);
        Ok(())
    };

    let img = data.image(image).to_vec();
    let vit = state.vit()?;
    let maps = vit.attention_maps(&state.encoder(BackboneSource::Current), &img)?;
    let heads = cfg.heads;
    for (i, m) in maps.iter().enumerate() {
        emit(format!("encoder_block{}_head{}.txt", i / heads, i % heads), m)?;
    }

    let tokens = cfg.backbone().num_patches() + 1;
    let label = data.labels().map_or(0, |l| l[image]);
    let layout = Layout::pseudo(&[(img.clone(), img)], &[label], 1, tokens);
    let pcfg = cfg.pipeline();
    let prep = fewshot::prepare(&state, BackboneSource::Current, &layout, &pcfg, None, &RngStream::new(cfg.seed, stream::INSPECT))?;
    let graph = tokengraph::build_graph(prep.embeddings.clone(), layout.meta.clone(), pcfg.similarity, pcfg.pair_mask)?;
    let graph = tokengraph::sparsify(&graph, pcfg.keep_fraction)?;
    emit("adjacency.txt".into(), &graph.adjacency().cast())?;
    let assign: Vec<f32> = prep.partition.assignment().iter().map(|&a| a as f32).collect();
    emit("assignment.txt".into(), &Tensor::new(vec![assign.len(), 1], assign)?)?;

    let mut tape = Tape::new();
    let bound = state.head_params().bind(&mut tape, |_| false)?;
    let h0 = tape.constant(prep.embeddings.clone())?;
    let refined = batr::refine(&mut tape, &bound, &state.head, h0, &prep.partition, &prep.mask, Some(&prep.keep), pcfg.stages)?;
    for (k, &m) in refined.intra.iter().enumerate() {
        emit(format!("intra_cluster{k}.txt"), tape.value(m))?;
    }
    if let Some(m) = refined.inter {
        emit("inter_cluster.txt".into(), tape.value(m))?;
    }
    if let Some(m) = refined.propagation {
        emit("propagation.txt".into(), tape.value(m))?;
    }
    let norms = |t: &Tensor<f32>| -> Vec<f32> {
        (0..t.rows()).map(|i| t.row(i).iter().map(|v| v * v).sum::<f32>().sqrt()).collect()
    };
    let (before, after) = (norms(&prep.embeddings), norms(tape.value(refined.nodes)));
    let n = before.len();
    let both: Vec<f32> = before.iter().zip(&after).flat_map(|(a, b)| [*a, *b]).collect();
    emit("embedding_norms.txt".into(), &Tensor::new(vec![n, 2], both)?)?;

    // View 0 occupies rows 0..tokens; row 0 is its class token.
    let (gh, gw) = vit.config().grid();
    let weights = prep.mask.value_weights();
    let (bytes, pixels) = pgm(&weights[1..tokens], gh, gw);
    let p = out_dir.join("importance.pgm");
    std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    files.push(p);
    if pixels.iter().all(|&v| v == 0) {
        warn!("importance map is all zero: every patch of this image was pruned");
    }
    Ok(InspectReport {
        files,
        heatmap: pixels,
        grid: (gh, gw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let (bytes, px) = pgm(&[0.0, 0.5, 1.0, 1.0], 2, 2);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(px, vec![0, 128, 255, 255]);
        let (_, uniform) = pgm(&[1.0; 6], 2, 3);
        assert!(uniform.iter().all(|&v| v == 255));
    }

    #[test]
    fn ablation_rows_add_components() {
        let rows = ablation_rows(&Config::default());
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].source, BackboneSource::Pretrained);
        assert!(!rows[1].pipeline.uses_head());
        let v = &rows[4].pipeline;
        assert!(v.stages.bilevel && v.stages.propagate && v.weighting.is_some());
        assert_eq!(*v, Config::default().pipeline());
    }
}
