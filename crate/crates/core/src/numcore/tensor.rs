use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type a tensor can hold. Runs use `f32`; gradient checks use `f64`.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// For callers that have already validated length and finiteness.
    pub(crate) fn from_checked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a 2-D tensor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == n), "ragged rows");
        let data = rows.iter().flatten().map(|&v| T::of(v)).collect();
        Tensor {
            shape: vec![m, n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Trailing extent for a 2-D view (product of all but the first dim).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Gathers rows of a 2-D tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn vstack(parts: &[&Tensor<T>]) -> Result<Self> {
        let c = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::dim("vstack", &parts[0].shape, &p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, c],
            data,
            requires_grad: false,
            grad: None,
        })
    }
}

pub(crate) fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn require_2d<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(op, s, &[0, 0])),
    }
}

/// `out (m×n) += a (m×k) · b (k×n)`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (m×n) += a (m×k) · bᵀ` where `b` is stored as n×k.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out (k×n) += aᵀ · b` where `a` is m×k and `b` is m×n.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Plain matrix product of two 2-D tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Row softmax in place over `row`, restricted to entries where `keep` is true.
/// Entries outside the mask become exactly zero.
pub(crate) fn softmax_slice<T: Real>(row: &mut [T], keep: Option<&[bool]>, inv_temp: T) {
    let allowed = |j: usize| keep.is_none_or(|k| k[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    let mut total = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = ((*v - max) * inv_temp).exp();
            total += *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Row-wise softmax with temperature, `exp((x - rowmax)/t) / Σ`.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::param(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let (m, n) = require_2d("softmax_rows", x)?;
    let mut out = x.data().to_vec();
    let inv = T::of(1.0 / temperature);
    for i in 0..m {
        softmax_slice(&mut out[i * n..(i + 1) * n], None, inv);
    }
    Tensor::new(vec![m, n], out)
}

/// Masked row softmax: entries where `keep[i*n+j]` is false get weight 0.
/// A row with no admissible entry is an error.
pub fn masked_softmax_rows<T: Real>(x: &Tensor<T>, keep: &[bool], temperature: f64) -> Result<Tensor<T>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::param(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let (m, n) = require_2d("masked_softmax_rows", x)?;
    if keep.len() != m * n {
        return Err(Error::dim("masked_softmax_rows", x.shape(), &[keep.len()]));
    }
    let mut out = x.data().to_vec();
    let inv = T::of(1.0 / temperature);
    for i in 0..m {
        let k = &keep[i * n..(i + 1) * n];
        if !k.iter().any(|&b| b) {
            return Err(Error::param(format!("softmax row {i} fully masked")));
        }
        softmax_slice(&mut out[i * n..(i + 1) * n], Some(k), inv);
    }
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_cases() {
        let i2 = Tensor::<f64>::eye(2);
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(matmul(&i2, &a).unwrap().data(), a.data());

        let p = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let q = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(matmul(&p, &q).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let ln2 = 2f64.ln();
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[vec![ln2, ln2]]), 1.0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[vec![0.0, 3f64.ln()]]), 1.0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
        let s = softmax_rows(&Tensor::<f32>::from_rows(&[vec![1000.0, 1000.0, 999.0]]), 1.0).unwrap();
        assert!(s.is_finite());
        assert!((s.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = Tensor::<f32>::zeros(&[1, 2]);
        assert!(matches!(softmax_rows(&x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax_rows(&x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn masked_softmax_zeroes_excluded() {
        let x = Tensor::<f64>::from_rows(&[vec![5.0, 1.0, 1.0]]);
        let s = masked_softmax_rows(&x, &[false, true, true], 1.0).unwrap();
        assert_eq!(s.data(), &[0.0, 0.5, 0.5]);
        assert!(masked_softmax_rows(&x, &[false, false, false], 1.0).is_err());
    }

    #[test]
    fn new_rejects_nan_and_bad_len() {
        assert!(Tensor::<f32>::new(vec![2], vec![1.0]).is_err());
        assert!(matches!(
            Tensor::<f32>::new(vec![1], vec![f32::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }
}
