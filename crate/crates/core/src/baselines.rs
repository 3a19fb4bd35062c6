//! Moment-matching (CORAL) and kernel two-sample (MMD) penalties, usable in
//! place of the KL alignment terms.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::gradients::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Gaussian-kernel bandwidths for [`mmd_penalty`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    bandwidths: Vec<f64>,
}

impl KernelBank {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        ensure!(!bandwidths.is_empty(), "kernel bank must not be empty");
        ensure!(
            bandwidths.iter().all(|&g| g > 0.0 && g.is_finite()),
            "kernel bandwidths must be positive"
        );
        Ok(Self { bandwidths })
    }

    /// Seven bandwidths `2^-3 .. 2^3` times the median pairwise distance of
    /// the pooled batch.
    pub fn median_heuristic<T: Scalar>(z_s: &Tensor<T>, z_t: &Tensor<T>) -> Self {
        let rows: Vec<&[T]> = (0..z_s.rows()).map(|r| z_s.row_slice(r)).chain((0..z_t.rows()).map(|r| z_t.row_slice(r))).collect();
        let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f64 = rows[i].iter().zip(rows[j]).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
                dists.push(d.sqrt());
            }
        }
        let median = if dists.is_empty() {
            1.0
        } else {
            let mid = dists.len() / 2;
            *dists.select_nth_unstable_by(mid, f64::total_cmp).1
        };
        let scale = if median > 0.0 && median.is_finite() { median } else { 1.0 };
        Self { bandwidths: (-3..=3).map(|e| scale * 2f64.powi(e)).collect() }
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }
}

fn check_batches<T: Scalar>(z_s: &Tensor<T>, z_t: &Tensor<T>) -> Result<()> {
    ensure!(z_s.rows() >= 2 && z_t.rows() >= 2, "batches need at least two rows, got {} and {}", z_s.rows(), z_t.rows());
    ensure!(z_s.cols() == z_t.cols(), "batches differ in dimension: {} vs {}", z_s.cols(), z_t.cols());
    Ok(())
}

/// `||C_S - C_T||_F^2 / d^2 + ||m_S - m_T||^2 / d` with unbiased batch
/// covariances `C` and means `m`.
pub fn coral_penalty<T: Scalar>(z_s: &Tensor<T>, z_t: &Tensor<T>) -> Result<T> {
    check_batches(z_s, z_t)?;
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(z_s.clone()), tape.constant(z_t.clone()));
    let out = tape_coral(&mut tape, a, b);
    tape.check_finite()?;
    Ok(tape.value(out).item())
}

fn tape_covariance<T: Scalar>(tape: &mut Tape<T>, z: Var) -> (Var, Var) {
    let n = tape.shape(z).0;
    let mean = tape.mean_rows(z);
    let neg = tape.neg(mean);
    let centered = tape.add_row(z, neg);
    let ct = tape.transpose(centered);
    let gram = tape.matmul(ct, centered);
    (tape.scale(gram, T::one() / T::lit((n - 1) as f64)), mean)
}

/// Tape version of [`coral_penalty`]. Both batches need at least two rows.
pub fn tape_coral<T: Scalar>(tape: &mut Tape<T>, z_s: Var, z_t: Var) -> Var {
    let d = T::lit(tape.shape(z_s).1 as f64);
    let (cs, ms) = tape_covariance(tape, z_s);
    let (ct, mt) = tape_covariance(tape, z_t);
    let dc = tape.sub(cs, ct);
    let dc2 = tape.square(dc);
    let cov_term = tape.sum(dc2);
    let cov_term = tape.scale(cov_term, T::one() / (d * d));
    let dm = tape.sub(ms, mt);
    let dm2 = tape.square(dm);
    let mean_term = tape.sum(dm2);
    let mean_term = tape.scale(mean_term, T::one() / d);
    tape.add(cov_term, mean_term)
}

/// Biased multi-kernel MMD^2:
/// `mean_k [ mean K_SS + mean K_TT - 2 mean K_ST ]`,
/// `K(a, b) = exp(-||a - b||^2 / (2 gamma^2))`.
pub fn mmd_penalty<T: Scalar>(z_s: &Tensor<T>, z_t: &Tensor<T>, kernels: &KernelBank) -> Result<T> {
    check_batches(z_s, z_t)?;
    ensure!(!kernels.bandwidths.is_empty(), "kernel bank must not be empty");
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(z_s.clone()), tape.constant(z_t.clone()));
    let out = tape_mmd(&mut tape, a, b, kernels);
    tape.check_finite()?;
    Ok(tape.value(out).item())
}

/// Tape version of [`mmd_penalty`].
pub fn tape_mmd<T: Scalar>(tape: &mut Tape<T>, z_s: Var, z_t: Var, kernels: &KernelBank) -> Var {
    let d_ss = tape.pairwise_sq_dist(z_s, z_s);
    let d_tt = tape.pairwise_sq_dist(z_t, z_t);
    let d_st = tape.pairwise_sq_dist(z_s, z_t);
    let mut total: Option<Var> = None;
    for &gamma in &kernels.bandwidths {
        let c = T::lit(-1.0 / (2.0 * gamma * gamma));
        let kernel_mean = |tape: &mut Tape<T>, d: Var| {
            let s = tape.scale(d, c);
            let k = tape.exp(s);
            tape.mean(k)
        };
        let kss = kernel_mean(tape, d_ss);
        let ktt = kernel_mean(tape, d_tt);
        let kst = kernel_mean(tape, d_st);
        let within = tape.add(kss, ktt);
        let cross = tape.scale(kst, T::lit(2.0));
        let term = tape.sub(within, cross);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let total = total.expect("kernel bank is non-empty");
    tape.scale(total, T::one() / T::lit(kernels.bandwidths.len() as f64))
}
