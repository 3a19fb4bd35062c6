//! Probabilistic encoder `p(z|x)`, linear classifier `p(y|z)`, the
//! bounded-loss softmax, and the Monte Carlo predictive distribution
//! `p(y|x) = E_{p(z|x)}[p(y|z)]`.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{standard_normal_vec, DiagGaussian, GaussianBatch};
use crate::error::{ensure, Error, Result};
use crate::gradients::{ParamVector, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Log-variance used when the encoder is run deterministically.
pub const DETERMINISTIC_LOG_VAR: f64 = -20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Whether the variance head is used or pinned to a negligible value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Probabilistic,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub classes: usize,
    pub activation: Activation,
    pub encoder: EncoderKind,
}

impl Architecture {
    /// Two tanh hidden layers of width 128.
    pub fn mlp(input_dim: usize, latent_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![128, 128],
            latent_dim,
            classes,
            activation: Activation::Tanh,
            encoder: EncoderKind::Probabilistic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim > 0, "input dimension must be positive");
        ensure!(self.latent_dim > 0, "latent dimension must be positive");
        ensure!(self.classes >= 2, "need at least two classes, got {}", self.classes);
        ensure!(self.hidden.iter().all(|&h| h > 0), "hidden widths must be positive");
        Ok(())
    }

    /// Widths of every encoder layer boundary, input through `2 * d_z`.
    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(2 * self.latent_dim);
        w
    }

    pub fn encoder_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Encoder and classifier weights.
///
/// Layout of the flat [`ParamVector`]: `(W, b)` per encoder layer, then the
/// classifier `(W, b)`. Weights are stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    arch: Architecture,
    params: ParamVector<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        let mut layer = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
            tensors.push(Tensor::from_vec(fan_in, fan_out, w));
            tensors.push(Tensor::zeros(1, fan_out));
        };
        for pair in arch.encoder_widths().windows(2) {
            layer(pair[0], pair[1], &mut rng);
        }
        layer(arch.latent_dim, arch.classes, &mut rng);
        Ok(Self { arch, params: ParamVector::new(tensors) })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut tensors = Vec::new();
        for pair in arch.encoder_widths().windows(2) {
            tensors.push(Tensor::zeros(pair[0], pair[1]));
            tensors.push(Tensor::zeros(1, pair[1]));
        }
        tensors.push(Tensor::zeros(arch.latent_dim, arch.classes));
        tensors.push(Tensor::zeros(1, arch.classes));
        Ok(Self { arch, params: ParamVector::new(tensors) })
    }

    pub fn from_parts(arch: Architecture, params: ParamVector<T>) -> Result<Self> {
        arch.validate()?;
        let want = Self::zeros(arch.clone())?.params.shapes();
        ensure!(params.shapes() == want, "parameter shapes {:?} do not match architecture {:?}", params.shapes(), want);
        ensure!(params.is_finite(), "parameters must be finite");
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamVector<T> {
        self.params
    }

    /// Runs the encoder on a batch (`n x d_x`) without recording gradients.
    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        ensure!(x.cols() == self.arch.input_dim, "input has {} features, expected {}", x.cols(), self.arch.input_dim);
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|t| tape.constant(t.clone())).collect();
        let xv = tape.constant(x.clone());
        let g = tape_encode(&mut tape, &self.arch, &vars, xv);
        tape.check_finite()?;
        Ok((tape.value(g.mean).clone(), tape.value(g.log_var).clone()))
    }

    /// Classifier logits for a batch of representations (`n x d_z`).
    pub fn logits_batch(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        ensure!(z.cols() == self.arch.latent_dim, "representation has {} dims, expected {}", z.cols(), self.arch.latent_dim);
        let k = self.params.len();
        let (w, b) = (self.params.tensor(k - 2), self.params.tensor(k - 1));
        let mut out = z.matmul(w);
        for r in 0..out.rows() {
            for (o, &bb) in out.row_slice_mut(r).iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        if !out.is_finite() {
            return Err(Error::NumericalOverflow { op: "classifier logits" });
        }
        Ok(out)
    }
}

/// Encoder forward pass on a tape; `vars` follows the [`ModelParams`] layout.
pub fn tape_encode<T: Scalar>(tape: &mut Tape<T>, arch: &Architecture, vars: &[Var], x: Var) -> GaussianBatch {
    let layers = arch.encoder_layers();
    let mut h = x;
    for l in 0..layers {
        h = tape.affine(h, vars[2 * l], vars[2 * l + 1]);
        if l + 1 < layers {
            h = match arch.activation {
                Activation::Tanh => tape.tanh(h),
                Activation::Relu => tape.relu(h),
            };
        }
    }
    let d = arch.latent_dim;
    let mean = tape.slice_cols(h, 0, d);
    let log_var = match arch.encoder {
        EncoderKind::Probabilistic => tape.slice_cols(h, d, d),
        EncoderKind::Deterministic => {
            let n = tape.shape(h).0;
            tape.constant(Tensor::full(n, d, T::lit(DETERMINISTIC_LOG_VAR)))
        }
    };
    GaussianBatch { mean, log_var }
}

/// Classifier logits on a tape.
pub fn tape_logits<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], z: Var) -> Var {
    let k = vars.len();
    tape.affine(z, vars[k - 2], vars[k - 1])
}

/// Mean of `-log q[y]` over the batch, where `q` is the softmax of `logits`,
/// passed through [`bounded_softmax`] when `bound` is given.
pub fn tape_mean_nll<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize], bound: Option<&BoundConfig>) -> Var {
    let log_q = match bound {
        Some(bc) => {
            let p = tape.softmax(logits);
            let pk = tape.scale(p, T::lit(bc.k));
            let q = tape.offset(pk, T::lit(bc.floor));
            tape.log(q)
        }
        None => tape.log_softmax(logits),
    };
    let picked = tape.gather(log_q, labels);
    let m = tape.mean(picked);
    tape.neg(m)
}

/// Single-input encoder evaluation.
pub fn encode<T: Scalar>(params: &ModelParams<T>, x: &[T]) -> Result<DiagGaussian<T>> {
    let xt = Tensor::row(x.to_vec());
    let (mu, lv) = params.encode_batch(&xt)?;
    DiagGaussian::new(mu.into_vec(), lv.into_vec())
}

/// `softmax(W z + b)`.
pub fn classify_probs<T: Scalar>(params: &ModelParams<T>, z: &[T]) -> Result<Vec<T>> {
    let logits = params.logits_batch(&Tensor::row(z.to_vec()))?;
    Ok(softmax(logits.data()))
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Lower-bounds every class probability so that `-log p <= M`.
///
/// `floor = exp(-M)` and `K = 1 - floor * C`; a probability vector `p` maps
/// to `p * K + floor`, which still sums to one and keeps the argmax.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub bound: f64,
    pub floor: f64,
    pub k: f64,
    pub classes: usize,
}

impl BoundConfig {
    /// Exact floor `exp(-m)`.
    pub fn new(m: f64, classes: usize) -> Result<Self> {
        ensure!(m > 0.0 && m.is_finite(), "loss bound M must be positive, got {m}");
        Self::build(m, (-m).exp(), classes)
    }

    /// Explicit floor (e.g. `0.05` for `M = 3`); the effective bound is
    /// `-ln(floor)`.
    pub fn with_floor(floor: f64, classes: usize) -> Result<Self> {
        ensure!(floor > 0.0 && floor < 1.0, "floor must lie in (0, 1), got {floor}");
        Self::build(-floor.ln(), floor, classes)
    }

    fn build(bound: f64, floor: f64, classes: usize) -> Result<Self> {
        ensure!(classes >= 2, "need at least two classes");
        if floor * classes as f64 >= 1.0 {
            return Err(Error::InvalidBound { floor, classes });
        }
        Ok(Self { bound, floor, k: 1.0 - floor * classes as f64, classes })
    }
}

pub fn bounded_softmax<T: Scalar>(p: &[T], bc: &BoundConfig) -> Result<Vec<T>> {
    ensure!(p.len() == bc.classes, "probability vector has {} entries, bound configured for {}", p.len(), bc.classes);
    if bc.floor * bc.classes as f64 >= 1.0 {
        return Err(Error::InvalidBound { floor: bc.floor, classes: bc.classes });
    }
    let (k, floor) = (T::lit(bc.k), T::lit(bc.floor));
    Ok(p.iter().map(|&pi| pi * k + floor).collect())
}

/// `-log p[y]`.
pub fn nll_loss<T: Scalar>(p: &[T], y: usize) -> Result<T> {
    ensure!(y < p.len(), "label {y} out of range for {} classes", p.len());
    if p[y] <= T::zero() {
        return Err(Error::InfiniteLoss { class: y });
    }
    Ok(-p[y].ln())
}

/// Monte Carlo estimate of the predictive distribution for a batch:
/// average over `samples` reparameterized draws of the bounded softmax
/// (raw softmax when `bound` is `None`). Returns `n x C`.
pub fn predictive_batch<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    samples: usize,
    bound: Option<&BoundConfig>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    ensure!(samples >= 1, "need at least one Monte Carlo sample");
    let (mu, lv) = params.encode_batch(x)?;
    let std = lv.map(|v| (T::lit(0.5) * v).exp());
    let (n, d) = mu.shape();
    let c = params.arch.classes;
    let mut acc = Tensor::zeros(n, c);
    let mut z = Tensor::zeros(n, d);
    for _ in 0..samples {
        let eps: Vec<T> = standard_normal_vec(rng, n * d);
        for (k, zk) in z.data_mut().iter_mut().enumerate() {
            *zk = mu.data()[k] + std.data()[k] * eps[k];
        }
        let logits = params.logits_batch(&z)?;
        for r in 0..n {
            let p = softmax(logits.row_slice(r));
            let q = match bound {
                Some(bc) => bounded_softmax(&p, bc)?,
                None => p,
            };
            for (a, v) in acc.row_slice_mut(r).iter_mut().zip(q) {
                *a += v;
            }
        }
    }
    let inv = T::one() / T::lit(samples as f64);
    Ok(acc.map(|v| v * inv))
}

/// Single-input predictive distribution.
pub fn predictive<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    x: &[T],
    samples: usize,
    bound: Option<&BoundConfig>,
    rng: &mut R,
) -> Result<Vec<T>> {
    Ok(predictive_batch(params, &Tensor::row(x.to_vec()), samples, bound, rng)?.into_vec())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk parameter container. Values are stored as 64-bit floats; JSON
/// numbers are written in shortest round-trip form so loading is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub arch: Architecture,
    pub shapes: Vec<(usize, usize)>,
    pub values: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(params: &ModelParams<T>, config_hash: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            arch: params.arch.clone(),
            shapes: params.params.shapes(),
            values: params.params.iter().map(|t| t.data().iter().map(|v| v.as_f64()).collect()).collect(),
        }
    }

    pub fn to_params<T: Scalar>(&self) -> Result<ModelParams<T>> {
        ensure!(self.version == CHECKPOINT_VERSION, "unsupported checkpoint version {}", self.version);
        ensure!(self.shapes.len() == self.values.len(), "checkpoint shape/value count mismatch");
        let tensors = self
            .shapes
            .iter()
            .zip(&self.values)
            .map(|(&(r, c), v)| Tensor::try_from_vec(r, c, v.iter().map(|&x| T::lit(x)).collect()))
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_parts(self.arch.clone(), ParamVector::new(tensors))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
