//! Dense tensors, reverse-mode autodiff, deterministic random streams, and
//! SGD. Everything else in the crate is built on this layer.

pub mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use params::{sgd_step, Bound, MomentumSgd, ParamStore};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{masked_softmax_rows, matmul, softmax_rows, Real, Tensor};

use crate::error::{Error, Result};

/// Inverted dropout on a tape value: in training mode each entry is zeroed
/// with probability `rate` and survivors are scaled by `1/(1-rate)`.
/// Outside training (or at rate 0) the input is returned unchanged.
pub fn dropout<T: Real>(tape: &mut Tape<T>, x: Var, rate: f64, rng: &mut RngStream, training: bool) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate must be in [0,1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let [m, n] = tape.shape(x);
    let keep = T::of(1.0 / (1.0 - rate));
    let mask = (0..m * n)
        .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
        .collect();
    tape.mul_const(x, mask)
}

/// Value-level dropout for tensors outside a tape.
pub fn dropout_tensor<T: Real>(x: &Tensor<T>, rate: f64, rng: &mut RngStream, training: bool) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone())?;
    let y = dropout(&mut tape, v, rate, rng, training)?;
    tape.value(y).clone().reshape(x.shape().to_vec())
}
