//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op pushes one node holding its forward value; nodes are therefore
//! already in topological order and `backward` is a single reverse sweep.
//! All values are treated as 2-D (`rows × cols`); scalars are `1×1`.

use std::collections::HashMap;

use super::tensor::{check_finite, gemm_nn, gemm_nt, gemm_tn, softmax_slice, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Vec<T>),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    Softplus(Var),
    Gelu(Var),
    Square(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Softmax { x: Var, inv_temp: T },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of the leaves that were registered with `requires_grad`.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_parts(x: f64) -> (f64, f64) {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, shape: [usize; 2], data: Vec<T>, name: &'static str) -> Result<Var> {
        check_finite(name, &data)?;
        let needs_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        if shape[0] * shape[1] != data.len() {
            return Err(Error::dim(name, &shape, &[data.len()]));
        }
        let value = Tensor::from_checked(shape.to_vec(), data);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::ScaleBy(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::MulConst(a, _)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Softplus(a)
            | Op::Gelu(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::MeanRows(a)
            | Op::GatherRows(a, _)
            | Op::SliceCols(a, _) => vec![*a],
            Op::LayerNorm { x, .. } | Op::Softmax { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }

    fn leaf_impl(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let (r, c) = (t.rows(), t.cols());
        let t = t.reshape(vec![r, c])?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value: Tensor::from_checked(t.shape().to_vec(), t.into_data()),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf_impl(t, false)
    }

    /// Registers a trainable leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf_impl(t, true)
    }

    pub fn scalar(&mut self, v: T) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let s = self.nodes[v.0].value.shape();
        [s[0], s[1]]
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<[usize; 2]> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(name, &sa, &sb));
        }
        Ok(sa)
    }

    fn unary(&mut self, a: Var, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let s = self.shape(a);
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(op, s, data, name)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let s = self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(op, s, data, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [k2, n]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), [m, n], out, "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [n, k2]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::dim("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(Op::MatMulNT(a, b), [m, n], out, "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        let src = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose(a), [n, m], out, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ([m, n], sr) = (self.shape(a), self.shape(row));
        if sr != [1, n] {
            return Err(Error::dim("add_row", &[m, n], &sr));
        }
        let r = self.data(row);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + r[i % n]).collect();
        self.push(Op::AddRow(a, row), [m, n], data, "add_row")
    }

    /// `a (m×n) ⊙ row (1×n)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ([m, n], sr) = (self.shape(a), self.shape(row));
        if sr != [1, n] {
            return Err(Error::dim("mul_row", &[m, n], &sr));
        }
        let r = self.data(row);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x * r[i % n]).collect();
        self.push(Op::MulRow(a, row), [m, n], data, "mul_row")
    }

    /// `a (m×n) ⊙ col (m×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let ([m, n], sc) = (self.shape(a), self.shape(col));
        if sc != [m, 1] {
            return Err(Error::dim("mul_col", &[m, n], &sc));
        }
        let c = self.data(col);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x * c[i / n]).collect();
        self.push(Op::MulCol(a, col), [m, n], data, "mul_col")
    }

    /// Multiplies every entry by a `1×1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1, 1] {
            return Err(Error::dim("scale_by", &self.shape(a), &self.shape(s)));
        }
        let k = self.scalar_value(s);
        self.unary(a, Op::ScaleBy(a, s), "scale_by", |x| x * k)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        self.unary(a, Op::Scale(a, k), "scale", |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        self.unary(a, Op::AddScalar(a), "add_scalar", |x| x + k)
    }

    /// Elementwise product with a constant same-shape buffer.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        let s = self.shape(a);
        if c.len() != s[0] * s[1] {
            return Err(Error::dim("mul_const", &s, &[c.len()]));
        }
        let data = self.data(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        self.push(Op::MulConst(a, c), s, data, "mul_const")
    }

    /// Scales row `i` by the constant `w[i]`.
    pub fn scale_rows_const(&mut self, a: Var, w: &[T]) -> Result<Var> {
        let [m, n] = self.shape(a);
        if w.len() != m {
            return Err(Error::dim("scale_rows_const", &[m, n], &[w.len()]));
        }
        let c = (0..m * n).map(|i| w[i / n]).collect();
        self.mul_const(a, c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", |x| x.exp())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), "sqrt", |x| x.sqrt())
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Recip(a), "recip", |x| T::one() / x)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), "softplus", |x| T::of(softplus(x.as_f64())))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), "gelu", |x| T::of(gelu_parts(x.as_f64()).0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), "square", |x| x * x)
    }

    /// Per-row standardization to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        let src = self.data(a);
        let mut out = vec![T::zero(); m * n];
        let mut rstd = Vec::with_capacity(m);
        let nf = T::of(n as f64);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let r = T::one() / (var + T::of(LN_EPS)).sqrt();
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * r;
            }
            rstd.push(r);
        }
        self.push(Op::LayerNorm { x: a, rstd }, [m, n], out, "layernorm")
    }

    /// Row softmax of `a / temperature` with max subtraction.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.softmax_impl(a, None, temperature)
    }

    /// Row softmax restricted to entries where `keep` is true (row-major, same
    /// size as `a`); excluded entries get probability exactly zero.
    pub fn masked_softmax_rows(&mut self, a: Var, keep: &[bool], temperature: f64) -> Result<Var> {
        self.softmax_impl(a, Some(keep), temperature)
    }

    fn softmax_impl(&mut self, a: Var, keep: Option<&[bool]>, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let [m, n] = self.shape(a);
        if let Some(k) = keep {
            if k.len() != m * n {
                return Err(Error::dim("masked_softmax_rows", &[m, n], &[k.len()]));
            }
            if let Some(i) = (0..m).find(|i| !k[i * n..(i + 1) * n].iter().any(|&b| b)) {
                return Err(Error::param(format!("softmax row {i} fully masked")));
            }
        }
        let inv = T::of(1.0 / temperature);
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            softmax_slice(&mut out[i * n..(i + 1) * n], keep.map(|k| &k[i * n..(i + 1) * n]), inv);
        }
        self.push(Op::Softmax { x: a, inv_temp: inv }, [m, n], out, "softmax_rows")
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [m, n] = self.shape(logits);
        if labels.len() != m {
            return Err(Error::dim("cross_entropy", &[m, n], &[labels.len()]));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::param(format!("label {l} out of range for {n} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &mut probs[i * n..(i + 1) * n];
            softmax_slice(row, None, T::one());
            loss -= row[l].max(T::min_positive_value()).ln();
        }
        let loss = loss / T::of(m as f64);
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            [1, 1],
            vec![loss],
            "cross_entropy",
        )
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mse", a, b)?;
        let n = (s[0] * s[1]) as f64;
        let v = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::of(n);
        self.push(Op::Mse(a, b), [1, 1], vec![v], "mse")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.data(a).iter().copied().sum();
        self.push(Op::Sum(a), [1, 1], vec![v], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len() as f64;
        let v = self.data(a).iter().copied().sum::<T>() / T::of(n);
        self.push(Op::Mean(a), [1, 1], vec![v], "mean")
    }

    /// Row sums as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        let src = self.data(a);
        let data = (0..m).map(|i| src[i * n..(i + 1) * n].iter().copied().sum()).collect();
        self.push(Op::SumCols(a), [m, 1], data, "sum_cols")
    }

    /// Column means as a `1×n` row (mean pooling over tokens).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if m == 0 {
            return Err(Error::param("mean over zero rows"));
        }
        let src = self.data(a);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        let inv = T::one() / T::of(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Op::MeanRows(a), [1, n], out, "mean_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0])[0];
        let mut n = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != m {
                return Err(Error::dim("concat_cols", &self.shape(parts[0]), &s));
            }
            n += s[1];
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let w = self.shape(p)[1];
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), [m, n], out, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0])[1];
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1] != n {
                return Err(Error::dim("concat_rows", &self.shape(parts[0]), &s));
            }
            m += s[0];
            out.extend_from_slice(self.data(p));
        }
        self.push(Op::ConcatRows(parts.to_vec()), [m, n], out, "concat_rows")
    }

    /// Selects rows by index; repeats are allowed and their gradients add.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let [m, n] = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::param(format!("row index {bad} out of range for {m} rows")));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        self.push(Op::GatherRows(a, idx.to_vec()), [idx.len(), n], out, "gather_rows")
    }

    /// Columns `start..start+len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.shape(a);
        if start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(Op::SliceCols(a, start), [m, len], out, "slice_cols")
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape; every leaf
    /// registered through [`Tape::param`] receives a gradient (zeros when the
    /// loss does not depend on it).
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        let mut out = HashMap::new();
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if matches!(node.op, Op::Leaf) {
                    out.insert(Var(idx), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                out.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            backprop(&nodes, &mut grads, idx, &g);
        }
        for (idx, node) in nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                out.insert(Var(idx), Tensor::zeros(node.value.shape()));
            }
        }
        for g in out.values() {
            check_finite("backward", g.data())?;
        }
        Ok(Gradients { grads: out })
    }
}

fn acc<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
    f(slot);
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], idx: usize, g: &[T]) {
    let node = &nodes[idx];
    let y = node.value.data();
    let [m, n] = [node.value.shape()[0], node.value.shape()[1]];
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| [nodes[v.0].value.shape()[0], nodes[v.0].value.shape()[1]];

    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let k = shp(*a)[1];
            acc(nodes, grads, *a, |ga| gemm_nt(g, val(*b), ga, m, n, k));
            acc(nodes, grads, *b, |gb| gemm_tn(val(*a), g, gb, m, k, n));
        }
        Op::MatMulNT(a, b) => {
            // C = A·Bᵀ, A: m×k, B: n×k
            let k = shp(*a)[1];
            acc(nodes, grads, *a, |ga| gemm_nn(g, val(*b), ga, m, n, k));
            acc(nodes, grads, *b, |gb| gemm_tn(g, val(*a), gb, m, n, k));
        }
        Op::Transpose(a) => acc(nodes, grads, *a, |ga| {
            // y is n_a×m_a where a is m×n of this output's transpose
            for i in 0..m {
                for j in 0..n {
                    ga[j * m + i] += g[i * n + j];
                }
            }
        }),
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
            acc(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
            acc(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, &d)| *x -= d));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * vb[i];
                }
            });
            acc(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * va[i];
                }
            });
        }
        Op::Div(a, b) => {
            let vb = val(*b);
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / vb[i];
                }
            });
            acc(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] -= g[i] * y[i] / vb[i];
                }
            });
        }
        Op::AddRow(a, r) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
            acc(nodes, grads, *r, |gr| {
                for (i, &d) in g.iter().enumerate() {
                    gr[i % n] += d;
                }
            });
        }
        Op::MulRow(a, r) => {
            let (va, vr) = (val(*a), val(*r));
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * vr[i % n];
                }
            });
            acc(nodes, grads, *r, |gr| {
                for i in 0..g.len() {
                    gr[i % n] += g[i] * va[i];
                }
            });
        }
        Op::MulCol(a, c) => {
            let (va, vc) = (val(*a), val(*c));
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * vc[i / n];
                }
            });
            acc(nodes, grads, *c, |gc| {
                for i in 0..g.len() {
                    gc[i / n] += g[i] * va[i];
                }
            });
        }
        Op::ScaleBy(a, s) => {
            let (va, k) = (val(*a), val(*s)[0]);
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * k));
            acc(nodes, grads, *s, |gs| {
                gs[0] += g.iter().zip(va).map(|(&d, &x)| d * x).sum::<T>();
            });
        }
        Op::Scale(a, k) => acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * *k)),
        Op::AddScalar(a) => acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d)),
        Op::MulConst(a, c) => acc(nodes, grads, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * c[i];
            }
        }),
        Op::Exp(a) => acc(nodes, grads, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * y[i];
            }
        }),
        Op::Sqrt(a) => acc(nodes, grads, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * T::of(0.5) / y[i];
            }
        }),
        Op::Recip(a) => acc(nodes, grads, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] -= g[i] * y[i] * y[i];
            }
        }),
        Op::Softplus(a) => {
            let va = val(*a);
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * T::of(sigmoid(va[i].as_f64()));
                }
            });
        }
        Op::Gelu(a) => {
            let va = val(*a);
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * T::of(gelu_parts(va[i].as_f64()).1);
                }
            });
        }
        Op::Square(a) => {
            let va = val(*a);
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * T::of(2.0) * va[i];
                }
            });
        }
        Op::LayerNorm { x, rstd } => acc(nodes, grads, *x, |gx| {
            let nf = T::of(n as f64);
            for i in 0..m {
                let gy = &g[i * n..(i + 1) * n];
                let yy = &y[i * n..(i + 1) * n];
                let mean_g = gy.iter().copied().sum::<T>() / nf;
                let mean_gy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() / nf;
                for j in 0..n {
                    gx[i * n + j] += rstd[i] * (gy[j] - mean_g - yy[j] * mean_gy);
                }
            }
        }),
        Op::Softmax { x, inv_temp } => acc(nodes, grads, *x, |gx| {
            for i in 0..m {
                let gy = &g[i * n..(i + 1) * n];
                let yy = &y[i * n..(i + 1) * n];
                let dot = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>();
                for j in 0..n {
                    gx[i * n + j] += *inv_temp * yy[j] * (gy[j] - dot);
                }
            }
        }),
        Op::CrossEntropy { logits, labels, probs } => {
            let c = shp(*logits)[1];
            let rows = labels.len();
            let scale = g[0] / T::of(rows as f64);
            acc(nodes, grads, *logits, |gl| {
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let t = if j == l { T::one() } else { T::zero() };
                        gl[i * c + j] += scale * (probs[i * c + j] - t);
                    }
                }
            });
        }
        Op::Mse(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let k = g[0] * T::of(2.0 / va.len() as f64);
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += k * (va[i] - vb[i]);
                }
            });
            acc(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] -= k * (va[i] - vb[i]);
                }
            });
        }
        Op::Sum(a) => acc(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        Op::Mean(a) => acc(nodes, grads, *a, |ga| {
            let k = g[0] / T::of(ga.len() as f64);
            ga.iter_mut().for_each(|x| *x += k)
        }),
        Op::SumCols(a) => {
            let w = shp(*a)[1];
            acc(nodes, grads, *a, |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i / w];
                }
            });
        }
        Op::MeanRows(a) => {
            let rows = shp(*a)[0];
            let inv = T::one() / T::of(rows as f64);
            acc(nodes, grads, *a, |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i % n] * inv;
                }
            });
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let w = shp(p)[1];
                acc(nodes, grads, p, |gp| {
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += g[i * n + off + j];
                        }
                    }
                });
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                acc(nodes, grads, p, |gp| {
                    gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, &d)| *x += d)
                });
                off += len;
            }
        }
        Op::SliceCols(a, start) => {
            let w = shp(*a)[1];
            acc(nodes, grads, *a, |ga| {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * w + start + j] += g[i * n + j];
                    }
                }
            });
        }
        Op::GatherRows(a, idx) => acc(nodes, grads, *a, |ga| {
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..n {
                    ga[src * n + j] += g[r * n + j];
                }
            }
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let s = t.sum(w).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap()).unwrap();
        let ww = t.add(w, w).unwrap();
        let s = t.sum(ww).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(w).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(t.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::full(&[1, 2], 1.0)).unwrap();
        let b = t.param(Tensor::full(&[1, 2], 1.0)).unwrap();
        let s = t.sum(a).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(Tensor::from_rows(&[vec![100.0, 0.0, 0.0]])).unwrap();
        let ce = t.cross_entropy(l, &[0]).unwrap();
        assert!(t.scalar_value(ce) < 1e-40);
    }

    #[test]
    fn mse_self_is_zero() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]])).unwrap();
        let l = t.mse(x, x).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);
    }

    #[test]
    fn layernorm_moments() {
        let mut t = Tape::<f64>::new();
        let x = t
            .constant(Tensor::from_rows(&[vec![1.0, 5.0, -3.0, 8.0], vec![10.0, 20.0, 30.0, 45.0]]))
            .unwrap();
        let y = t.layernorm(x).unwrap();
        for i in 0..2 {
            let row = t.value(y).row(i);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn overflow_is_rejected() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::full(&[1, 1], 200.0)).unwrap();
        assert!(matches!(t.exp(x), Err(Error::NonFinite { op: "exp" })));
    }
}
