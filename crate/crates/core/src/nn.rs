//! Layer building blocks shared by the backbone and the refinement head.

use crate::error::Result;
use crate::numcore::{dropout, Bound, ParamStore, Real, RngStream, Tape, Tensor, Var};

/// How attention logits are scaled before the row softmax.
#[derive(Clone, Copy, Debug)]
pub enum Scale {
    /// Fixed multiplier, typically `1/sqrt(d_head)`.
    Const(f64),
    /// `1×1` tape value multiplied into the logits.
    Learned(Var),
}

pub struct AttnOpts<'a, T: Real> {
    pub heads: usize,
    pub scale: Scale,
    /// Row-major admissibility mask over query × key pairs.
    pub keep: Option<&'a [bool]>,
    /// Constant per-row multipliers applied to the value rows.
    pub value_weights: Option<&'a [T]>,
}

impl<T: Real> AttnOpts<'_, T> {
    pub fn plain(heads: usize, scale: Scale) -> Self {
        AttnOpts {
            heads,
            scale,
            keep: None,
            value_weights: None,
        }
    }
}

pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

pub fn layer_norm<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layernorm(x)?;
    let n = tape.mul_row(n, gain)?;
    tape.add_row(n, bias)
}

/// Multi-head self-attention over the rows of `x`. Returns the concatenated
/// head outputs (before any output projection) and each head's attention
/// matrix.
pub fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    opts: &AttnOpts<'_, T>,
) -> Result<(Var, Vec<Var>)> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let mut v = tape.matmul(x, wv)?;
    if let Some(w) = opts.value_weights {
        v = tape.scale_rows_const(v, w)?;
    }
    let d = tape.shape(q)[1];
    let dh = d / opts.heads;
    let mut outs = Vec::with_capacity(opts.heads);
    let mut maps = Vec::with_capacity(opts.heads);
    for h in 0..opts.heads {
        let (qh, kh, vh) = if opts.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = match opts.scale {
            Scale::Const(c) => tape.scale(logits, c)?,
            Scale::Learned(s) => tape.scale_by(logits, s)?,
        };
        let att = match opts.keep {
            Some(keep) => tape.masked_softmax_rows(logits, keep, 1.0)?,
            None => tape.softmax_rows(logits, 1.0)?,
        };
        outs.push(tape.matmul(att, vh)?);
        maps.push(att);
    }
    let out = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok((out, maps))
}

pub fn ffn<T: Real>(tape: &mut Tape<T>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = linear(tape, x, w1, Some(b1))?;
    let h = tape.gelu(h)?;
    linear(tape, h, w2, Some(b2))
}

/// Names of the tensors making up one pre-norm transformer block under
/// `prefix`.
pub struct BlockNames {
    pub ln1_g: String,
    pub ln1_b: String,
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: Option<(String, String)>,
    pub ln2_g: String,
    pub ln2_b: String,
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl BlockNames {
    pub fn new(prefix: &str, out_proj: bool) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        BlockNames {
            ln1_g: n("ln1.g"),
            ln1_b: n("ln1.b"),
            wq: n("attn.wq"),
            wk: n("attn.wk"),
            wv: n("attn.wv"),
            wo: out_proj.then(|| (n("attn.wo"), n("attn.bo"))),
            ln2_g: n("ln2.g"),
            ln2_b: n("ln2.b"),
            w1: n("ffn.w1"),
            b1: n("ffn.b1"),
            w2: n("ffn.w2"),
            b2: n("ffn.b2"),
        }
    }

    /// Adds freshly initialized tensors for this block. `branch_gain`
    /// scales the value and FFN output weights.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, dim: usize, hidden: usize, branch_gain: f64, rng: &mut RngStream) {
        store.insert(&self.ln1_g, Tensor::full(&[1, dim], T::one()));
        store.insert(&self.ln1_b, Tensor::zeros(&[1, dim]));
        store.insert(&self.wq, xavier(rng, dim, dim, 1.0));
        store.insert(&self.wk, xavier(rng, dim, dim, 1.0));
        store.insert(&self.wv, xavier(rng, dim, dim, branch_gain));
        if let Some((wo, bo)) = &self.wo {
            store.insert(wo, xavier(rng, dim, dim, branch_gain));
            store.insert(bo, Tensor::zeros(&[1, dim]));
        }
        store.insert(&self.ln2_g, Tensor::full(&[1, dim], T::one()));
        store.insert(&self.ln2_b, Tensor::zeros(&[1, dim]));
        store.insert(&self.w1, xavier(rng, dim, hidden, 1.0));
        store.insert(&self.b1, Tensor::zeros(&[1, hidden]));
        store.insert(&self.w2, xavier(rng, hidden, dim, branch_gain));
        store.insert(&self.b2, Tensor::zeros(&[1, dim]));
    }
}

/// Dropout settings for one block application.
pub struct Stochastic<'a> {
    pub rate: f64,
    pub training: bool,
    pub rng: &'a mut RngStream,
}

/// Pre-norm block: `x + Attn(LN(x))`, then `+ FFN(LN(·))`.
pub fn block<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    names: &BlockNames,
    x: Var,
    opts: &AttnOpts<'_, T>,
    mut drop: Option<Stochastic<'_>>,
) -> Result<(Var, Vec<Var>)> {
    let h = layer_norm(tape, x, bound.get(&names.ln1_g)?, bound.get(&names.ln1_b)?)?;
    let (mut a, maps) = self_attention(
        tape,
        h,
        bound.get(&names.wq)?,
        bound.get(&names.wk)?,
        bound.get(&names.wv)?,
        opts,
    )?;
    if let Some((wo, bo)) = &names.wo {
        a = linear(tape, a, bound.get(wo)?, Some(bound.get(bo)?))?;
    }
    if let Some(d) = drop.as_mut() {
        a = dropout(tape, a, d.rate, d.rng, d.training)?;
    }
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, x, bound.get(&names.ln2_g)?, bound.get(&names.ln2_b)?)?;
    let mut f = ffn(
        tape,
        h,
        bound.get(&names.w1)?,
        bound.get(&names.b1)?,
        bound.get(&names.w2)?,
        bound.get(&names.b2)?,
    )?;
    if let Some(d) = drop.as_mut() {
        f = dropout(tape, f, d.rate, d.rng, d.training)?;
    }
    Ok((tape.add(x, f)?, maps))
}

/// Xavier-normal matrix `fan_in × fan_out`, scaled by `gain`.
pub fn xavier<T: Real>(rng: &mut RngStream, fan_in: usize, fan_out: usize, gain: f64) -> Tensor<T> {
    let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal(rng, &[fan_in, fan_out], std)
}

pub fn normal<T: Real>(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = T::of(std * rng.normal()));
    t
}
