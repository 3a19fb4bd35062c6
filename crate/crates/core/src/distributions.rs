//! Diagonal Gaussians, equal-weight minibatch mixtures, and the minibatch
//! estimators of the reverse and forward KL between representation
//! distributions.
//!
//! The marginal `p(z)` of a domain is approximated by the mixture of the
//! per-example Gaussians of one minibatch. The estimators evaluate each
//! domain's mixture at one reparameterized sample per example:
//!
//! ```text
//! reverse = 1/B sum_i [ log p_T(z_T_i) - log p_S(z_T_i) ]
//! forward = 1/B sum_i [ log p_S(z_S_i) - log p_T(z_S_i) ]
//! ```
//!
//! Functions prefixed `tape_` build the same quantities on a [`Tape`] so the
//! trainer can differentiate through means, log-variances and samples.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::gradients::{log_sum_exp, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// `N(mean, diag(exp(log_variance)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian<T> {
    mean: Vec<T>,
    log_variance: Vec<T>,
}

impl<T: Scalar> DiagGaussian<T> {
    pub fn new(mean: Vec<T>, log_variance: Vec<T>) -> Result<Self> {
        ensure!(
            mean.len() == log_variance.len(),
            "mean has {} entries but log-variance has {}",
            mean.len(),
            log_variance.len()
        );
        ensure!(
            mean.iter().chain(&log_variance).all(|x| x.is_finite()),
            "Gaussian parameters must be finite"
        );
        Ok(Self { mean, log_variance })
    }

    /// Convenience constructor from variances.
    pub fn from_variance(mean: Vec<T>, variance: Vec<T>) -> Result<Self> {
        ensure!(variance.iter().all(|&v| v > T::zero()), "variances must be positive");
        Self::new(mean, variance.into_iter().map(T::ln).collect())
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![T::zero(); dim], log_variance: vec![T::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn log_variance(&self) -> &[T] {
        &self.log_variance
    }

    pub fn variance(&self) -> Vec<T> {
        self.log_variance.iter().map(|lv| lv.exp()).collect()
    }
}

/// Equal-weight mixture of diagonal Gaussians sharing a dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchMixture<T> {
    components: Vec<DiagGaussian<T>>,
}

impl<T: Scalar> BatchMixture<T> {
    pub fn new(components: Vec<DiagGaussian<T>>) -> Result<Self> {
        ensure!(!components.is_empty(), "mixture needs at least one component");
        let d = components[0].dim();
        ensure!(components.iter().all(|c| c.dim() == d), "mixture components differ in dimension");
        Ok(Self { components })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[DiagGaussian<T>] {
        &self.components
    }
}

/// `log N(z; mu, diag(sigma^2))`.
pub fn gaussian_log_density<T: Scalar>(g: &DiagGaussian<T>, z: &[T]) -> Result<T> {
    ensure!(z.len() == g.dim(), "point has dimension {} but Gaussian has {}", z.len(), g.dim());
    let half = T::lit(0.5);
    let log_2pi = (T::lit(2.0) * T::PI()).ln();
    let mut acc = T::zero();
    for ((&zi, &mu), &lv) in z.iter().zip(&g.mean).zip(&g.log_variance) {
        let diff = zi - mu;
        acc -= half * (log_2pi + lv + diff * diff * (-lv).exp());
    }
    Ok(acc)
}

/// `mu + exp(log_var / 2) * eps`.
pub fn sample_reparam<T: Scalar>(g: &DiagGaussian<T>, eps: &[T]) -> Result<Vec<T>> {
    ensure!(eps.len() == g.dim(), "noise has dimension {} but Gaussian has {}", eps.len(), g.dim());
    let half = T::lit(0.5);
    Ok(g.mean.iter().zip(&g.log_variance).zip(eps).map(|((&mu, &lv), &e)| mu + (half * lv).exp() * e).collect())
}

/// Draws one reparameterized sample using noise from `rng`.
pub fn sample<T: Scalar, R: Rng + ?Sized>(g: &DiagGaussian<T>, rng: &mut R) -> Vec<T> {
    let eps = standard_normal_vec(rng, g.dim());
    sample_reparam(g, &eps).expect("noise matches dimension")
}

pub fn standard_normal_vec<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// `log( 1/B sum_b N(z; mu_b, sigma_b^2) )`, evaluated with log-sum-exp.
pub fn mixture_log_density<T: Scalar>(m: &BatchMixture<T>, z: &[T]) -> Result<T> {
    ensure!(!m.is_empty(), "empty mixture");
    let logs = m.components.iter().map(|c| gaussian_log_density(c, z)).collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&logs) - T::lit(m.len() as f64).ln())
}

/// Reverse (`KL[p_T | p_S]`) and forward (`KL[p_S | p_T]`) estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlTerms<T> {
    pub reverse: T,
    pub forward: T,
}

/// Minibatch estimates of both KL directions.
///
/// `z_src[i]` must be drawn from `src` component `i` and `z_tgt[i]` from `tgt`
/// component `i`.
pub fn minibatch_kl_terms<T: Scalar>(
    src: &BatchMixture<T>,
    tgt: &BatchMixture<T>,
    z_src: &[Vec<T>],
    z_tgt: &[Vec<T>],
) -> Result<KlTerms<T>> {
    ensure!(src.dim() == tgt.dim(), "mixtures differ in dimension: {} vs {}", src.dim(), tgt.dim());
    ensure!(
        z_src.len() == src.len(),
        "{} source samples for {} source components",
        z_src.len(),
        src.len()
    );
    ensure!(
        z_tgt.len() == tgt.len(),
        "{} target samples for {} target components",
        z_tgt.len(),
        tgt.len()
    );
    let mut reverse = T::zero();
    for z in z_tgt {
        reverse += mixture_log_density(tgt, z)? - mixture_log_density(src, z)?;
    }
    let mut forward = T::zero();
    for z in z_src {
        forward += mixture_log_density(src, z)? - mixture_log_density(tgt, z)?;
    }
    Ok(KlTerms {
        reverse: reverse / T::lit(z_tgt.len() as f64),
        forward: forward / T::lit(z_src.len() as f64),
    })
}

/// `KL[g1 | g2]` for diagonal Gaussians.
pub fn gaussian_kl_closed_form<T: Scalar>(g1: &DiagGaussian<T>, g2: &DiagGaussian<T>) -> Result<T> {
    ensure!(g1.dim() == g2.dim(), "Gaussians differ in dimension: {} vs {}", g1.dim(), g2.dim());
    let half = T::lit(0.5);
    let mut kl = T::zero();
    for j in 0..g1.dim() {
        let (lv1, lv2) = (g1.log_variance[j], g2.log_variance[j]);
        let diff = g1.mean[j] - g2.mean[j];
        // log(s2/s1) + (s1^2 + diff^2) / (2 s2^2) - 1/2
        kl += half * (lv2 - lv1) + (lv1.exp() + diff * diff) / (T::lit(2.0) * lv2.exp()) - half;
    }
    Ok(kl)
}

/// A batch of diagonal Gaussians on a tape: row `b` of `mean` / `log_var`
/// parameterizes component `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussianBatch {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianBatch {
    pub fn from_mixture<T: Scalar>(tape: &mut Tape<T>, m: &BatchMixture<T>, differentiable: bool) -> Self {
        let rows: Vec<Vec<T>> = m.components.iter().map(|c| c.mean.clone()).collect();
        let lv: Vec<Vec<T>> = m.components.iter().map(|c| c.log_variance.clone()).collect();
        let mean = Tensor::from_rows(&rows).expect("mixture components share a dimension");
        let log_var = Tensor::from_rows(&lv).expect("mixture components share a dimension");
        if differentiable {
            Self { mean: tape.param(mean), log_var: tape.param(log_var) }
        } else {
            Self { mean: tape.constant(mean), log_var: tape.constant(log_var) }
        }
    }
}

/// `mean + exp(log_var / 2) * eps` for a `B x d` noise tensor.
pub fn tape_sample_reparam<T: Scalar>(tape: &mut Tape<T>, g: GaussianBatch, eps: Tensor<T>) -> Var {
    let eps = tape.constant(eps);
    let half_lv = tape.scale(g.log_var, T::lit(0.5));
    let std = tape.exp(half_lv);
    let noise = tape.mul(std, eps);
    tape.add(g.mean, noise)
}

/// Mixture log-density of every row of `z` (`n x d`), returned as `n x 1`.
pub fn tape_mixture_log_density<T: Scalar>(tape: &mut Tape<T>, z: Var, mix: GaussianBatch) -> Var {
    let b = tape.shape(mix.mean).0;
    let pairwise = tape.pairwise_gaussian_log_pdf(z, mix.mean, mix.log_var);
    let lse = tape.log_sum_exp(pairwise);
    tape.offset(lse, -T::lit(b as f64).ln())
}

/// Tape version of [`minibatch_kl_terms`]; returns `(reverse, forward)` as
/// `1 x 1` nodes.
pub fn tape_minibatch_kl<T: Scalar>(
    tape: &mut Tape<T>,
    src: GaussianBatch,
    tgt: GaussianBatch,
    z_src: Var,
    z_tgt: Var,
) -> (Var, Var) {
    let t_at_t = tape_mixture_log_density(tape, z_tgt, tgt);
    let s_at_t = tape_mixture_log_density(tape, z_tgt, src);
    let rev = tape.sub(t_at_t, s_at_t);
    let reverse = tape.mean(rev);

    let s_at_s = tape_mixture_log_density(tape, z_src, src);
    let t_at_s = tape_mixture_log_density(tape, z_src, tgt);
    let fwd = tape.sub(s_at_s, t_at_s);
    let forward = tape.mean(fwd);
    (reverse, forward)
}
