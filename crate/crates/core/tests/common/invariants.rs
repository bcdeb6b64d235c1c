//! Normalization and uncertainty checks on randomized inputs, each returning
//! the worst deviation found so callers choose their own sweep.

use batr_core::batr::{self, HeadConfig, Stages};
use batr_core::numcore::{masked_softmax_rows, softmax_rows, RngStream, Tape, Tensor};
use batr_core::tokengraph::{self, NodeMeta, PairMask, Partition, Role, Similarity};
use batr_core::vit::{BackboneConfig, Vit};
use batr_core::weighting::{self, ImportanceMask, UncertaintyReport};

fn rand(rng: &mut RngStream, m: usize, n: usize, scale: f64) -> Tensor<f64> {
    Tensor::new(vec![m, n], (0..m * n).map(|_| scale * rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

fn row_error(t: &Tensor<f64>) -> f64 {
    (0..t.rows()).map(|i| (t.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

/// Admissibility with every row keeping at least its diagonal.
fn random_keep(rng: &mut RngStream, n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i / n == i % n || rng.uniform() < 0.6).collect()
}

/// Plain, masked and on-tape softmax of `scale`-sized logits.
pub fn softmax_rows_error(seed: u64, scale: f64) -> f64 {
    let mut rng = RngStream::new(seed, 1);
    let n = 2 + rng.below(12);
    let x = rand(&mut rng, n, n, scale);
    let keep = random_keep(&mut rng, n);
    let temp = rng.uniform_in(0.05, 2.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let a = tape.softmax_rows(xv, temp).unwrap();
    let b = tape.masked_softmax_rows(xv, &keep, temp).unwrap();
    [
        softmax_rows(&x, temp).unwrap(),
        masked_softmax_rows(&x, &keep, temp).unwrap(),
        tape.value(a).clone(),
        tape.value(b).clone(),
    ]
    .iter()
    .map(row_error)
    .fold(0.0, f64::max)
}

fn nodes(images: usize, tokens: usize) -> Vec<NodeMeta> {
    (0..images * tokens)
        .map(|i| NodeMeta {
            image_id: i / tokens / 2,
            view_id: (i / tokens) % 2,
            token_index: i % tokens,
            role: Role::Support,
            label: Some(0),
        })
        .collect()
}

/// Sparsified adjacency rows for both similarities and every pair mask.
pub fn adjacency_rows_error(seed: u64, scale: f64) -> f64 {
    let mut rng = RngStream::new(seed, 2);
    let (images, tokens, d) = (2 + rng.below(3), 2 + rng.below(4), 4);
    let meta = nodes(images, tokens);
    let emb = rand(&mut rng, meta.len(), d, scale);
    let keep_fraction = rng.uniform_in(0.1, 1.0);
    let mut worst = 0.0f64;
    for sim in [Similarity::Cosine, Similarity::Dot] {
        for mask in [PairMask::SameImage, PairMask::None, PairMask::Diagonal] {
            let g = tokengraph::build_graph(emb.clone(), meta.clone(), sim, mask).unwrap();
            worst = worst.max(row_error(g.adjacency()));
            let s = tokengraph::sparsify(&g, keep_fraction).unwrap();
            worst = worst.max(row_error(s.adjacency()));
        }
    }
    worst
}

/// Every attention map of the refinement head and of the encoder.
pub fn attention_rows_error(seed: u64, scale: f64) -> f64 {
    let mut rng = RngStream::new(seed, 3);
    let cfg = HeadConfig::new(8);
    let params = batr::init_params::<f64>(&cfg, &mut rng).unwrap();
    let n = 3 + rng.below(14);
    let k = 1 + rng.below(n.min(4));
    let h = rand(&mut rng, n, 8, scale);
    let part = Partition::new((0..n).map(|i| i % k).collect(), k).unwrap();
    let mask = ImportanceMask::uniform(&part);
    let keep = random_keep(&mut rng, n);
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, |_| false).unwrap();
    let hv = tape.constant(h).unwrap();
    let r = batr::refine(&mut tape, &b, &cfg, hv, &part, &mask, Some(&keep), Stages::default()).unwrap();
    let mut maps: Vec<Tensor<f64>> = r.intra.iter().map(|&m| tape.value(m).clone()).collect();
    maps.extend(r.inter.map(|m| tape.value(m).clone()));
    maps.extend(r.propagation.map(|m| tape.value(m).clone()));

    let bb = BackboneConfig {
        height: 8,
        width: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        ffn_mult: 2,
        dropout_rate: 0.1,
        mask_ratio: 0.75,
        decoder_depth: 1,
    };
    let vit = Vit::new(bb).unwrap();
    let mut enc = vit.init_params::<f64>(&mut rng);
    // blow the patch projection up to the requested magnitude
    for v in enc.get_mut("enc.patch.w").unwrap().data_mut() {
        *v *= scale;
    }
    let img: Vec<f32> = (0..64).map(|_| rng.uniform() as f32).collect();
    maps.extend(vit.attention_maps(&enc, &img).unwrap());
    maps.iter().map(row_error).fold(0.0, f64::max)
}

/// Violations of the uncertainty contract on random variances, or `None`.
pub fn uncertainty_contract(seed: u64) -> Option<String> {
    let mut rng = RngStream::new(seed, 4);
    let n = 1 + rng.below(20);
    let variance: Vec<f64> = (0..n)
        .map(|_| if rng.uniform() < 0.3 { 0.0 } else { rng.uniform_in(0.0, 5.0) })
        .collect();
    let r = UncertaintyReport::from_variance(variance.clone(), 2);
    if r.u_tilde.iter().any(|u| !(0.0..=1.0).contains(u)) {
        return Some(format!("u_tilde outside [0,1]: {:?}", r.u_tilde));
    }
    let any = variance.iter().any(|&v| v > 0.0);
    let max = r.u_tilde.iter().cloned().fold(0.0, f64::max);
    if any && max != 1.0 {
        return Some(format!("max u_tilde {max} with positive variance"));
    }
    let zero = UncertaintyReport::from_variance(vec![0.0; n], 2);
    if zero.u_tilde.iter().any(|&u| u != 0.0) {
        return Some("zero variance did not give zero scores".into());
    }
    // Two passes over one 1-D token, values on a dyadic grid so the hand
    // computation is exact.
    let a = (rng.below(64) as f64 - 32.0) / 8.0;
    let b = (rng.below(64) as f64 - 32.0) / 8.0;
    let passes = [Tensor::new(vec![1, 1], vec![a]).unwrap(), Tensor::new(vec![1, 1], vec![b]).unwrap()];
    let got = weighting::uncertainty_from_passes(&passes).unwrap();
    let mean = (a + b) / 2.0;
    let want = ((a - mean).powi(2) + (b - mean).powi(2)) / 2.0;
    if got.variance[0] != want {
        return Some(format!("two-pass variance {} != hand value {want} for ({a}, {b})", got.variance[0]));
    }
    None
}
