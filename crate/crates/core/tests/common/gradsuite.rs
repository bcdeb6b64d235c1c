//! Gradient checks shared by the unit suite and the acceptance target:
//! every differentiable tape operation on randomized shapes, and the full
//! episode objective through encoder and head.

use batr_core::batr::HeadConfig;
use batr_core::fewshot::{self, BackboneSource, Layout, ModelState, PipelineConfig};
use batr_core::numcore::gradcheck::{self, CheckReport, DEFAULT_STEP};
use batr_core::numcore::{Bound, ParamStore, RngStream, Tape, Tensor, Var};
use batr_core::vit::{patchify_image, BackboneConfig, Vit};
use batr_core::Result;

/// Worst relative error of one check, labelled by operation and case.
#[derive(Clone, Debug)]
pub struct Finding {
    pub label: String,
    pub max_rel_err: f64,
    /// Tensors whose analytic gradient is identically zero.
    pub dead: usize,
    pub tensors: usize,
}

fn finding(label: String, reports: &[CheckReport]) -> Finding {
    Finding {
        label,
        max_rel_err: gradcheck::worst(reports),
        dead: reports.iter().filter(|r| r.max_abs_grad <= 1e-10).count(),
        tensors: reports.len(),
    }
}


fn rand(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

/// Contracts `x` with fixed random weights so no output direction is lost
/// to symmetry (softmax rows summing to one, say).
fn probe(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let [m, n] = tape.shape(x);
    let mut r = RngStream::new(seed, 99);
    let w: Vec<f64> = (0..m * n).map(|_| r.uniform_in(-1.0, 1.0)).collect();
    let y = tape.mul_const(x, w)?;
    tape.sum(y)
}


struct Case {
    seed: u64,
    m: usize,
    k: usize,
    n: usize,
    store: ParamStore<f64>,
}

fn case(seed: u64) -> Case {
    let mut rng = RngStream::new(seed, 0);
    let m = 1 + rng.below(4);
    let k = 1 + rng.below(4);
    let n = 2 + rng.below(3);
    let mut s = ParamStore::new();
    s.insert("a", rand(&mut rng, &[m, k], -1.0, 1.0));
    s.insert("b", rand(&mut rng, &[k, n], -1.0, 1.0));
    s.insert("bt", rand(&mut rng, &[n, k], -1.0, 1.0));
    s.insert("c", rand(&mut rng, &[m, n], -2.0, 2.0));
    s.insert("d", rand(&mut rng, &[m, n], -2.0, 2.0));
    s.insert("pos", rand(&mut rng, &[m, n], 0.5, 2.0));
    s.insert("row", rand(&mut rng, &[1, n], -1.0, 1.0));
    s.insert("col", rand(&mut rng, &[m, 1], -1.0, 1.0));
    s.insert("s", rand(&mut rng, &[1, 1], -1.0, 1.0));
    Case { seed, m, k, n, store: s }
}

type OpFn = fn(&mut Tape<f64>, &Bound, &Case) -> Result<Var>;

fn ops() -> Vec<(&'static str, OpFn)> {
    vec![
        ("matmul", |t, b, _| t.matmul(b.get("a")?, b.get("b")?)),
        ("matmul_nt", |t, b, _| t.matmul_nt(b.get("a")?, b.get("bt")?)),
        ("transpose", |t, b, _| t.transpose(b.get("c")?)),
        ("add", |t, b, _| t.add(b.get("c")?, b.get("d")?)),
        ("sub", |t, b, _| t.sub(b.get("c")?, b.get("d")?)),
        ("mul", |t, b, _| t.mul(b.get("c")?, b.get("d")?)),
        ("div", |t, b, _| t.div(b.get("c")?, b.get("pos")?)),
        ("add_row", |t, b, _| t.add_row(b.get("c")?, b.get("row")?)),
        ("mul_row", |t, b, _| t.mul_row(b.get("c")?, b.get("row")?)),
        ("mul_col", |t, b, _| t.mul_col(b.get("c")?, b.get("col")?)),
        ("scale_by", |t, b, _| t.scale_by(b.get("c")?, b.get("s")?)),
        ("scale", |t, b, _| t.scale(b.get("c")?, -0.7)),
        ("add_scalar", |t, b, _| t.add_scalar(b.get("c")?, 0.3)),
        ("scale_rows_const", |t, b, c| {
            let w: Vec<f64> = (0..c.m).map(|i| 0.5 + i as f64).collect();
            t.scale_rows_const(b.get("c")?, &w)
        }),
        ("exp", |t, b, _| t.exp(b.get("c")?)),
        ("sqrt", |t, b, _| t.sqrt(b.get("pos")?)),
        ("recip", |t, b, _| t.recip(b.get("pos")?)),
        ("softplus", |t, b, _| t.softplus(b.get("c")?)),
        ("gelu", |t, b, _| t.gelu(b.get("c")?)),
        ("square", |t, b, _| t.square(b.get("c")?)),
        ("layernorm", |t, b, _| t.layernorm(b.get("c")?)),
        ("softmax_rows", |t, b, _| t.softmax_rows(b.get("c")?, 0.7)),
        ("masked_softmax_rows", |t, b, c| {
            let keep: Vec<bool> = (0..c.m * c.n).map(|i| i % c.n == (i / c.n) % c.n || i % 3 != 0).collect();
            t.masked_softmax_rows(b.get("c")?, &keep, 1.3)
        }),
        ("cross_entropy", |t, b, c| {
            let labels: Vec<usize> = (0..c.m).map(|i| (i + c.seed as usize) % c.n).collect();
            t.cross_entropy(b.get("c")?, &labels)
        }),
        ("mse", |t, b, _| t.mse(b.get("c")?, b.get("d")?)),
        ("sum", |t, b, _| t.sum(b.get("c")?)),
        ("mean", |t, b, _| t.mean(b.get("c")?)),
        ("sum_cols", |t, b, _| t.sum_cols(b.get("c")?)),
        ("mean_rows", |t, b, _| t.mean_rows(b.get("c")?)),
        ("concat_cols", |t, b, _| t.concat_cols(&[b.get("c")?, b.get("d")?, b.get("col")?])),
        ("concat_rows", |t, b, _| t.concat_rows(&[b.get("c")?, b.get("row")?, b.get("d")?])),
        ("gather_rows", |t, b, c| {
            let idx: Vec<usize> = (0..c.m + 2).map(|i| (i * 7 + 1) % c.m).collect();
            t.gather_rows(b.get("c")?, &idx)
        }),
        ("slice_cols", |t, b, c| t.slice_cols(b.get("c")?, 1, c.n - 1)),
    ]
}



fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        height: 8,
        width: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        ffn_mult: 2,
        dropout_rate: 0.1,
        mask_ratio: 0.75,
        decoder_depth: 1,
    }
}

fn image(rng: &mut RngStream, class: usize) -> Vec<f32> {
    (0..64)
        .map(|i| {
            let base = if (i / 8 + class) % 2 == 0 { 0.8 } else { 0.2 };
            (base + 0.1 * rng.uniform_in(-1.0, 1.0)) as f32
        })
        .collect()
}

/// The episode objective with encoder and head weights as inputs, the graph
/// structure (partition, mask) held fixed as it is during a training step.
fn objective_case(seed: u64, pseudo: bool) -> Vec<CheckReport> {
    let bb = tiny_backbone();
    let vit = Vit::new(bb.clone()).unwrap();
    let mut rng = RngStream::new(seed, 1);
    let pre = vit.init_params::<f64>(&mut rng);
    let state = ModelState::from_pretrained(bb.clone(), HeadConfig::new(8), &pre, &mut rng).unwrap();
    let views: Vec<(Vec<f32>, Vec<f32>)> = (0..2).map(|k| (image(&mut rng, k), image(&mut rng, k))).collect();
    let tokens = bb.num_patches() + 1;
    let layout = if pseudo {
        Layout::pseudo(&views, &[0, 1], 2, tokens)
    } else {
        let queries = (0..2).map(|k| image(&mut rng, k)).collect();
        Layout::full(&views, &[0, 1], queries, &[0, 1], 2, tokens)
    };
    let cfg = PipelineConfig {
        clusters: 3,
        k_local: 4,
        k_global: 2,
        mc_passes: 2,
        ..PipelineConfig::default()
    };
    let prep = fewshot::prepare(&state, BackboneSource::Current, &layout, &cfg, None, &RngStream::new(seed, 2)).unwrap();
    let mut inputs = state.params.filter_prefix("enc.");
    inputs.extend(state.head_params());
    gradcheck::check(&inputs, DEFAULT_STEP, |tape, bound| {
        let mut rows = Vec::new();
        let mut r = RngStream::new(seed, 3);
        for img in &layout.images {
            let p = patchify_image::<f64>(img, 1, 8, 8, 4)?;
            let pv = tape.constant(p)?;
            rows.push(vit.encode_on_tape(tape, bound, pv, None, &mut r, false)?.tokens);
        }
        let h0 = tape.concat_rows(&rows)?;
        let (loss, _) = fewshot::objective_on_tape(tape, bound, &state.head, h0, &prep, &layout, &cfg)?;
        Ok(loss.total)
    })
    .unwrap()
}


/// Every operation on `cases` random shapes, plus a composite chain.
/// Returns the findings and the number of distinct shapes visited.
pub fn op_suite(cases: u64) -> (Vec<Finding>, usize) {
    let ops = ops();
    let mut shapes = std::collections::HashSet::new();
    let mut out = Vec::new();
    for seed in 0..cases {
        let c = case(seed);
        shapes.insert((c.m, c.k, c.n));
        for (name, op) in &ops {
            let reports = gradcheck::check(&c.store, DEFAULT_STEP, |t, b| {
                let y = op(t, b, &c)?;
                probe(t, y, seed)
            })
            .unwrap();
            out.push(finding(format!("{name} [{}x{}x{}]", c.m, c.k, c.n), &reports));
        }
        let reports = gradcheck::check(&c.store, DEFAULT_STEP, |t, b| {
            let x = t.matmul(b.get("a")?, b.get("b")?)?;
            let x = t.add_row(x, b.get("row")?)?;
            let x = t.layernorm(x)?;
            let x = t.gelu(x)?;
            let sm = t.softmax_rows(x, 1.0)?;
            let y = t.mul(sm, b.get("d")?)?;
            probe(t, y, seed + 1)
        })
        .unwrap();
        out.push(finding(format!("composite [{}x{}x{}]", c.m, c.k, c.n), &reports));
    }
    (out, shapes.len())
}

/// The objective on a query-bearing episode and on a pseudo-episode.
pub fn objective_suite() -> Vec<Finding> {
    [(5, false), (6, true)]
        .into_iter()
        .map(|(seed, pseudo)| {
            let kind = if pseudo { "pseudo" } else { "full" };
            finding(format!("objective ({kind} episode)"), &objective_case(seed, pseudo))
        })
        .collect()
}
