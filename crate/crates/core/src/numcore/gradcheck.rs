//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Largest relative error found for one tensor.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients
/// from blowing up the ratio.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients of `f` against central differences for every
/// entry of every tensor in `inputs`.
///
/// `f` builds a scalar loss from the bound inputs on a fresh tape.
pub fn check<F>(inputs: &ParamStore<f64>, step: f64, f: F) -> Result<Vec<CheckReport>>
where
    F: Fn(&mut Tape<f64>, &super::params::Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = inputs.bind(&mut tape, |_| true)?;
    let loss = f(&mut tape, &bound)?;
    let mut grads = tape.backward(loss)?;

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let b = store.bind(&mut t, |_| false)?;
        let l = f(&mut t, &b)?;
        Ok(t.scalar_value(l))
    };

    let mut reports = Vec::new();
    let mut work = inputs.clone();
    for (name, tensor) in inputs.iter() {
        let analytic: Tensor<f64> = grads
            .take(bound.get(name)?)
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        let max_abs = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(analytic.data()[i], numeric, 1e-3));
        }
        reports.push(CheckReport {
            name: name.clone(),
            max_rel_err: worst,
            max_abs_grad: max_abs,
        });
    }
    Ok(reports)
}

/// Worst relative error over all reports.
pub fn worst(reports: &[CheckReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}
