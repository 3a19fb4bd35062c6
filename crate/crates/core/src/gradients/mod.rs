//! Exact gradients for the training objective plus an Adam optimizer.
//!
//! The engine is a small matrix-level reverse-mode tape ([`Tape`]). Every
//! objective variant in the crate (plain cross-entropy, reverse/forward KL
//! alignment, CORAL, MMD) is expressed in the tape vocabulary, so one
//! backward pass serves all of them.

mod adam;
mod tape;
mod tensor;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{log_sum_exp, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

/// Ordered list of trainable tensors. Shapes are fixed at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(tensors: Vec<Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(other: &Self) -> Self {
        let tensors = other.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    pub fn same_shapes(&self, other: &Self) -> bool {
        self.len() == other.len() && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Flat view of entry `k` across all tensors, in declaration order.
    pub fn get_flat(&self, mut k: usize) -> T {
        for t in &self.tensors {
            if k < t.len() {
                return t.data()[k];
            }
            k -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut k: usize, v: T) {
        for t in &mut self.tensors {
            if k < t.len() {
                t.data_mut()[k] = v;
                return;
            }
            k -= t.len();
        }
        panic!("flat index out of range");
    }

    /// Places every tensor on the tape as a differentiable leaf.
    pub fn to_tape(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }
}

/// Evaluates `objective` on a fresh tape and returns its value together with
/// the exact gradient with respect to every tensor of `params`.
///
/// The closure receives the tape and one [`Var`] per parameter tensor and
/// must return a `1 x 1` node.
pub fn value_and_grad<T, F>(params: &ParamVector<T>, objective: F) -> Result<(T, ParamVector<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let out = objective(&mut tape, &vars)?;
    ensure!(tape.shape(out) == (1, 1), "objective must be scalar, got {:?}", tape.shape(out));
    let mut grads = tape.backward(out)?;
    let value = tape.value(out).item();
    let tensors = vars.iter().map(|&v| grads.take(v)).collect();
    Ok((value, ParamVector::new(tensors)))
}

/// `||a - n|| / max(||a||, ||n||, 1e-8)` over whole flattened vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Central-difference gradient of `objective` with step `1e-5 * max(1, |x|)`
/// per coordinate.
pub fn numeric_gradient<F>(params: &ParamVector<f64>, objective: F) -> Result<Vec<f64>>
where
    F: Fn(&ParamVector<f64>) -> Result<f64>,
{
    let mut out = Vec::with_capacity(params.numel());
    let mut p = params.clone();
    for k in 0..params.numel() {
        let x = params.get_flat(k);
        let h = 1e-5 * x.abs().max(1.0);
        p.set_flat(k, x + h);
        let up = objective(&p)?;
        p.set_flat(k, x - h);
        let down = objective(&p)?;
        p.set_flat(k, x);
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Relative error between the tape gradient of a scalar tape program and
/// its central differences; see [`relative_error`].
pub fn gradient_check<F>(params: &ParamVector<f64>, program: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (_, grad) = value_and_grad(params, &program)?;
    let analytic: Vec<f64> = (0..grad.numel()).map(|k| grad.get_flat(k)).collect();
    let numeric = numeric_gradient(params, |p| {
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let out = program(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    })?;
    Ok(relative_error(&analytic, &numeric))
}
