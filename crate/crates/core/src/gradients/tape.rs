//! Matrix-valued reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the nodes in reverse, accumulating adjoints only for nodes that
//! depend on a parameter leaf. Random draws enter as constants, so gradients
//! reach sampled representations only through the reparameterization path.

use crate::error::{Error, Result};
use crate::gradients::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    PairwiseGaussianLogPdf { z: Var, mean: Var, log_var: Var },
    PairwiseSqDist(Var, Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::AddCol(..) => "add_col",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::Gather(..) => "gather",
            Op::SliceCols(..) => "slice_cols",
            Op::PairwiseGaussianLogPdf { .. } => "pairwise_gaussian_log_pdf",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    first_non_finite: Option<&'static str>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

/// Overflow-safe `log(sum(exp(row)))`.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), first_non_finite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Name of the first operation whose output was not finite, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    /// Error out if any recorded value so far was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NumericalOverflow { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(op.name());
        }
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant (inputs, noise draws, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), value, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), value, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "`{}` operands differ in shape", op.name());
        let value = va.zip_map(vb, f);
        let rg = self.rg(a) || self.rg(b);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), (1, va.cols()), "`{}` expects a 1x{} row", op.name(), va.cols());
        let mut value = va.clone();
        let cols = va.cols();
        for r in 0..va.rows() {
            for (x, &b) in value.row_slice_mut(r).iter_mut().zip(vr.data()) {
                *x = f(*x, b);
            }
        }
        debug_assert_eq!(value.cols(), cols);
        let rg = self.rg(a) || self.rg(row);
        self.push(op, value, rg)
    }

    /// `a[i, j] + row[0, j]`; the bias term of an affine map.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// `a[i, j] * row[0, j]`
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    /// `a[i, j] + col[i, 0]`
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.shape(), (va.rows(), 1), "`add_col` expects a {}x1 column", va.rows());
        let mut value = va.clone();
        for r in 0..va.rows() {
            let c = vc.data()[r];
            for x in value.row_slice_mut(r) {
                *x += c;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(Op::AddCol(a, col), value, rg)
    }

    /// `x W + b` with `W` stored `in x out` and `b` a `1 x out` row.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xw = self.matmul(x, weight);
        self.add_row(xw, bias)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(op, value, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.unary(a, Op::Scale(a, k), move |x| x * k)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Offset(a), move |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), T::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), T::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), T::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = Tensor::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            softmax_row(va.row_slice(r), value.row_slice_mut(r));
        }
        let rg = self.rg(a);
        self.push(Op::Softmax(a), value, rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..va.rows() {
            let lse = log_sum_exp(va.row_slice(r));
            for x in value.row_slice_mut(r) {
                *x -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a), value, rg)
    }

    /// Row-wise log-sum-exp, `n x m -> n x 1`.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| log_sum_exp(va.row_slice(r))).collect();
        let value = Tensor::from_vec(va.rows(), 1, data);
        let rg = self.rg(a);
        self.push(Op::LogSumExp(a), value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Tensor::scalar(va.sum() / T::lit(va.len() as f64));
        let rg = self.rg(a);
        self.push(Op::Mean(a), value, rg)
    }

    /// Column sums, `n x m -> 1 x m`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = Tensor::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, &x) in value.data_mut().iter_mut().zip(va.row_slice(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(Op::SumRows(a), value, rg)
    }

    /// Column means, `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows();
        let s = self.sum_rows(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Row sums, `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row_slice(r).iter().copied().sum()).collect();
        let value = Tensor::from_vec(va.rows(), 1, data);
        let rg = self.rg(a);
        self.push(Op::SumCols(a), value, rg)
    }

    /// Picks `a[i, index[i]]` for every row, `n x m -> n x 1`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(index.len(), va.rows(), "gather needs one index per row");
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < va.cols(), "gather index {c} out of range {}", va.cols());
                va.get(r, c)
            })
            .collect();
        let value = Tensor::from_vec(va.rows(), 1, data);
        let rg = self.rg(a);
        self.push(Op::Gather(a, index.to_vec()), value, rg)
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut value = Tensor::zeros(va.rows(), len);
        for r in 0..va.rows() {
            value.row_slice_mut(r).copy_from_slice(&va.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, start), value, rg)
    }

    /// `out[i, j] = log N(z_i; mean_j, diag(exp(log_var_j)))` for an `n x d`
    /// batch of points against `m x d` component parameters.
    pub fn pairwise_gaussian_log_pdf(&mut self, z: Var, mean: Var, log_var: Var) -> Var {
        let (vz, vm, vl) = (self.value(z), self.value(mean), self.value(log_var));
        assert_eq!(vm.shape(), vl.shape(), "mean and log-variance shapes differ");
        assert_eq!(vz.cols(), vm.cols(), "point and component dimensions differ");
        let (n, m, d) = (vz.rows(), vm.rows(), vz.cols());
        let half = T::lit(0.5);
        let log_2pi = (T::lit(2.0) * T::PI()).ln();
        let precision = vl.map(|lv| (-lv).exp());
        let norm: Vec<T> = (0..m)
            .map(|j| -half * (T::lit(d as f64) * log_2pi + vl.row_slice(j).iter().copied().sum::<T>()))
            .collect();
        // sum_k (z - mu)^2 p expanded into two products
        let z2 = vz.map(|x| x * x);
        let mp = vm.zip_map(&precision, |a, b| a * b);
        let c: Vec<T> = (0..m).map(|j| vm.row_slice(j).iter().zip(mp.row_slice(j)).map(|(&a, &b)| a * b).sum()).collect();
        let mut value = z2.matmul_t(false, &precision, true);
        let cross = vz.matmul_t(false, &mp, true);
        for i in 0..n {
            let out = value.row_slice_mut(i);
            for (j, (o, &x)) in out.iter_mut().zip(cross.row_slice(i)).enumerate() {
                *o = norm[j] - half * (*o - T::lit(2.0) * x + c[j]);
            }
        }
        let rg = self.rg(z) || self.rg(mean) || self.rg(log_var);
        self.push(Op::PairwiseGaussianLogPdf { z, mean, log_var }, value, rg)
    }

    /// `out[i, j] = ||a_i - b_j||^2`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "pairwise_sq_dist dimensions differ");
        let mut value = Tensor::zeros(va.rows(), vb.rows());
        for i in 0..va.rows() {
            let ai = va.row_slice(i);
            for j in 0..vb.rows() {
                let d: T = ai.iter().zip(vb.row_slice(j)).map(|(&x, &y)| (x - y) * (x - y)).sum();
                value.set(i, j, d);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::PairwiseSqDist(a, b), value, rg)
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        self.check_finite()?;
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[output.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NumericalOverflow { op: node.op.name() });
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let da = g.matmul_t(false, self.value(*b), true);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = self.value(*a).matmul_t(true, g, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(vb, |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(va, |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(vb, |x, y| x / y));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let t = g.zip_map(out, |x, o| x * o);
                    self.accumulate(grads, *b, t.zip_map(vb, |x, y| -x / y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                if self.rg(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (x, &s) in da.row_slice_mut(r).iter_mut().zip(vr.data()) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*row) {
                    self.accumulate(grads, *row, column_sums(&g.zip_map(va, |x, y| x * y)));
                }
            }
            Op::AddCol(a, col) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*col) {
                    let data = (0..g.rows()).map(|r| g.row_slice(r).iter().copied().sum()).collect();
                    self.accumulate(grads, *col, Tensor::from_vec(g.rows(), 1, data));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, g.map(|x| x * k));
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, o| x * o)),
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(self.value(*a), |x, v| x / v)),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |x, o| x * (T::one() - o * o))),
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, v| if v > T::zero() { x } else { T::zero() }),
            ),
            Op::Softplus(a) => self.accumulate(grads, *a, g.zip_map(self.value(*a), |x, v| x * sigmoid(v))),
            Op::Square(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |x, v| T::lit(2.0) * x * v))
            }
            Op::Softmax(a) => {
                let mut da = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (gr, sr) = (g.row_slice(r), out.row_slice(r));
                    let dot: T = gr.iter().zip(sr).map(|(&x, &s)| x * s).sum();
                    for ((d, &x), &s) in da.row_slice_mut(r).iter_mut().zip(gr).zip(sr) {
                        *d = s * (x - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                let mut da = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let gr = g.row_slice(r);
                    let total: T = gr.iter().copied().sum();
                    for ((d, &x), &lo) in da.row_slice_mut(r).iter_mut().zip(gr).zip(out.row_slice(r)) {
                        *d = x - lo.exp() * total;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LogSumExp(a) => {
                let va = self.value(*a);
                let mut da = Tensor::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let (lse, gr) = (out.data()[r], g.data()[r]);
                    for (d, &x) in da.row_slice_mut(r).iter_mut().zip(va.row_slice(r)) {
                        *d = gr * (x - lse).exp();
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let k = g.item() / T::lit((r * c) as f64);
                self.accumulate(grads, *a, Tensor::full(r, c, k));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                for i in 0..r {
                    da.row_slice_mut(i).copy_from_slice(g.data());
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    da.row_slice_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Gather(a, index) => {
                let (r, c) = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                for (i, &j) in index.iter().enumerate() {
                    da.set(i, j, g.data()[i]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                let len = g.cols();
                for i in 0..r {
                    da.row_slice_mut(i)[*start..*start + len].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *a, da);
            }
            Op::PairwiseGaussianLogPdf { z, mean, log_var } => {
                self.pairwise_gaussian_backward(*z, *mean, *log_var, g, grads);
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.cols();
                let mut da = Tensor::zeros(va.rows(), d);
                let mut db = Tensor::zeros(vb.rows(), d);
                let two = T::lit(2.0);
                for i in 0..va.rows() {
                    for j in 0..vb.rows() {
                        let gij = g.get(i, j);
                        if gij == T::zero() {
                            continue;
                        }
                        for k in 0..d {
                            let t = two * gij * (va.get(i, k) - vb.get(j, k));
                            da.data_mut()[i * d + k] += t;
                            db.data_mut()[j * d + k] -= t;
                        }
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
        }
    }

    fn pairwise_gaussian_backward(
        &self,
        z: Var,
        mean: Var,
        log_var: Var,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vz, vm, vl) = (self.value(z), self.value(mean), self.value(log_var));
        let (m, d) = (vm.rows(), vz.cols());
        let half = T::lit(0.5);
        let precision = vl.map(|lv| (-lv).exp());
        let mp = vm.zip_map(&precision, |a, b| a * b);
        let s = column_sums(g);
        let mut dz = g.matmul(&mp);
        let gp = g.matmul(&precision);
        for (o, (&x, &y)) in dz.data_mut().iter_mut().zip(vz.data().iter().zip(gp.data())) {
            *o -= x * y;
        }
        let gz = g.matmul_t(true, vz, false);
        let gz2 = g.matmul_t(true, &vz.map(|x| x * x), false);
        let mut dm = Tensor::zeros(m, d);
        let mut dl = Tensor::zeros(m, d);
        for j in 0..m {
            let sj = s.data()[j];
            for k in 0..d {
                let (mu, pr, a, b) = (vm.get(j, k), precision.get(j, k), gz.get(j, k), gz2.get(j, k));
                dm.set(j, k, pr * (a - mu * sj));
                dl.set(j, k, half * (pr * (b - T::lit(2.0) * mu * a + mu * mu * sj) - sj));
            }
        }
        self.accumulate(grads, z, dz);
        self.accumulate(grads, mean, dm);
        self.accumulate(grads, log_var, dl);
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(g.row_slice(r)) {
            *o += x;
        }
    }
    out
}
