//! The training objective (cross-entropy plus weighted alignment terms) and
//! the minibatch Adam loop around it.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{tape_coral, tape_mmd, KernelBank};
use crate::data::{minibatch_stream, Dataset};
use crate::distributions::{standard_normal_vec, tape_minibatch_kl, tape_sample_reparam, GaussianBatch, KlTerms};
use crate::error::{ensure, Error, Result};
use crate::gradients::{adam_step, AdamConfig, AdamState, ParamVector, Tape, Tensor, Var};
use crate::model::{predictive_batch, tape_encode, tape_logits, tape_mean_nll, Activation, Architecture, BoundConfig, EncoderKind, ModelParams};
use crate::scalar::Scalar;

/// Which penalty accompanies the cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    Kl,
    Coral,
    Mmd,
}

/// Named method presets: alignment mode plus encoder kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    ErmProb,
    Kl,
    Coral,
    Mmd,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Erm, Method::ErmProb, Method::Kl, Method::Coral, Method::Mmd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::ErmProb => "erm-prob",
            Method::Kl => "kl",
            Method::Coral => "coral",
            Method::Mmd => "mmd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn alignment(self) -> Alignment {
        match self {
            Method::Erm | Method::ErmProb => Alignment::None,
            Method::Kl => Alignment::Kl,
            Method::Coral => Alignment::Coral,
            Method::Mmd => Alignment::Mmd,
        }
    }

    pub fn encoder(self) -> EncoderKind {
        match self {
            Method::ErmProb | Method::Kl => EncoderKind::Probabilistic,
            Method::Erm | Method::Coral | Method::Mmd => EncoderKind::Deterministic,
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Reverse-KL weight.
    pub beta: f64,
    /// Forward-KL weight.
    pub beta_aux: f64,
    /// Per-example loss bound.
    pub m: f64,
    /// Probability floor of the bounded softmax; `None` uses `exp(-m)`.
    pub bound_floor: Option<f64>,
    /// Apply the bounded softmax in training and evaluation.
    pub bounded_loss: bool,
    pub batch_size: usize,
    /// Monte Carlo samples for the evaluation predictive.
    pub eval_samples: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub encoder: EncoderKind,
    pub alignment: Alignment,
    pub coral_coef: f64,
    pub mmd_coef: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            beta_aux: 0.0,
            m: 3.0,
            bound_floor: Some(0.05),
            bounded_loss: true,
            batch_size: 256,
            eval_samples: 64,
            lr: 1e-3,
            epochs: 100,
            seed: 0,
            latent_dim: 128,
            hidden: vec![128, 128],
            activation: Activation::Tanh,
            encoder: EncoderKind::Probabilistic,
            alignment: Alignment::Kl,
            coral_coef: 1e-2,
            mmd_coef: 1e-2,
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

impl TrainConfig {
    pub fn with_method(mut self, method: Method) -> Self {
        self.alignment = method.alignment();
        self.encoder = method.encoder();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(config_err(field, format!("must be a finite non-negative number, got {v}")))
            }
        };
        nonneg("beta", self.beta)?;
        nonneg("beta_aux", self.beta_aux)?;
        nonneg("coral_coef", self.coral_coef)?;
        nonneg("mmd_coef", self.mmd_coef)?;
        if self.beta_aux > self.beta {
            return Err(config_err("beta_aux", format!("must not exceed beta ({} > {})", self.beta_aux, self.beta)));
        }
        if !(self.m.is_finite() && self.m > 0.0) {
            return Err(config_err("m", format!("must be positive, got {}", self.m)));
        }
        if let Some(f) = self.bound_floor {
            if !(f > 0.0 && f < 1.0) {
                return Err(config_err("bound_floor", format!("must lie in (0, 1), got {f}")));
            }
            if f < (-self.m).exp() {
                return Err(config_err("bound_floor", format!("{f} is below exp(-m) = {}; the loss would exceed m", (-self.m).exp())));
            }
        }
        let min_batch = if self.alignment == Alignment::None { 1 } else { 2 };
        if self.batch_size < min_batch {
            return Err(config_err("batch_size", format!("must be at least {min_batch} with alignment {:?}", self.alignment)));
        }
        if self.eval_samples == 0 {
            return Err(config_err("eval_samples", "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.latent_dim == 0 {
            return Err(config_err("latent_dim", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(config_err("hidden", "layer widths must be positive"));
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize, classes: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            latent_dim: self.latent_dim,
            classes,
            activation: self.activation,
            encoder: self.encoder,
        }
    }

    /// The bounded-softmax settings for `classes` classes, or `None` when
    /// the plain softmax is configured.
    pub fn bound(&self, classes: usize) -> Result<Option<BoundConfig>> {
        if !self.bounded_loss {
            return Ok(None);
        }
        let bc = match self.bound_floor {
            Some(f) => BoundConfig::with_floor(f, classes),
            None => BoundConfig::new(self.m, classes),
        };
        bc.map(Some).map_err(|e| config_err("bound_floor", e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        write!(out, "{b:02x}").expect("string write");
    }
    out
}

/// Independent seed for a named random stream of a run.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const STREAM_INIT: u64 = 1;
pub const STREAM_NOISE: u64 = 2;
pub const STREAM_EVAL: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 1 << 32;

/// One labeled source minibatch and one unlabeled target minibatch.
#[derive(Clone, Copy, Debug)]
pub struct Minibatch<'a, T> {
    pub source_x: &'a Tensor<T>,
    pub source_y: &'a [usize],
    pub target_x: &'a Tensor<T>,
}

/// Reparameterization noise for both halves of a minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise<T> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Scalar> Noise<T> {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, latent_dim: usize) -> Self {
        let source = Tensor::from_vec(batch, latent_dim, standard_normal_vec(rng, batch * latent_dim));
        let target = Tensor::from_vec(batch, latent_dim, standard_normal_vec(rng, batch * latent_dim));
        Self { source, target }
    }
}

/// Value of each part of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms<T> {
    pub total: T,
    pub nll: T,
    pub reverse_kl: T,
    pub forward_kl: T,
    /// CORAL or MMD penalty (unweighted); zero for the other modes.
    pub penalty: T,
}

struct ObjectiveVars {
    total: Var,
    nll: Var,
    reverse_kl: Var,
    forward_kl: Var,
    penalty: Option<Var>,
}

fn build_objective<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &Architecture,
    vars: &[Var],
    batch: &Minibatch<'_, T>,
    noise: &Noise<T>,
    cfg: &TrainConfig,
) -> Result<ObjectiveVars> {
    let b = batch.source_x.rows();
    ensure!(
        batch.target_x.rows() == b && batch.source_y.len() == b,
        "source batch ({b} inputs, {} labels) and target batch ({}) must share one size",
        batch.source_y.len(),
        batch.target_x.rows()
    );
    ensure!(b >= 1, "empty minibatch");
    ensure!(
        noise.source.shape() == (b, arch.latent_dim) && noise.target.shape() == (b, arch.latent_dim),
        "noise must be {b} x {}",
        arch.latent_dim
    );
    let bound = cfg.bound(arch.classes)?;

    let xs = tape.constant(batch.source_x.clone());
    let xt = tape.constant(batch.target_x.clone());
    let src: GaussianBatch = tape_encode(tape, arch, vars, xs);
    let tgt: GaussianBatch = tape_encode(tape, arch, vars, xt);
    let z_s = tape_sample_reparam(tape, src, noise.source.clone());
    let z_t = tape_sample_reparam(tape, tgt, noise.target.clone());

    let logits = tape_logits(tape, vars, z_s);
    let nll = tape_mean_nll(tape, logits, batch.source_y, bound.as_ref());
    // Both KL directions are always recorded so that every mode consumes
    // the same randomness and reports the same diagnostics.
    let (reverse_kl, forward_kl) = tape_minibatch_kl(tape, src, tgt, z_s, z_t);

    let (total, penalty) = match cfg.alignment {
        Alignment::None => (nll, None),
        Alignment::Kl => {
            let r = tape.scale(reverse_kl, T::lit(cfg.beta));
            let f = tape.scale(forward_kl, T::lit(cfg.beta_aux));
            let t = tape.add(nll, r);
            (tape.add(t, f), None)
        }
        Alignment::Coral => {
            ensure!(b >= 2, "CORAL needs batches of at least two");
            let p = tape_coral(tape, z_s, z_t);
            let w = tape.scale(p, T::lit(cfg.coral_coef));
            (tape.add(nll, w), Some(p))
        }
        Alignment::Mmd => {
            ensure!(b >= 2, "MMD needs batches of at least two");
            let bank = KernelBank::median_heuristic(tape.value(z_s), tape.value(z_t));
            let p = tape_mmd(tape, z_s, z_t, &bank);
            let w = tape.scale(p, T::lit(cfg.mmd_coef));
            (tape.add(nll, w), Some(p))
        }
    };
    tape.check_finite()?;
    Ok(ObjectiveVars { total, nll, reverse_kl, forward_kl, penalty })
}

fn read_terms<T: Scalar>(tape: &Tape<T>, v: &ObjectiveVars) -> ObjectiveTerms<T> {
    ObjectiveTerms {
        total: tape.value(v.total).item(),
        nll: tape.value(v.nll).item(),
        reverse_kl: tape.value(v.reverse_kl).item(),
        forward_kl: tape.value(v.forward_kl).item(),
        penalty: v.penalty.map_or(T::zero(), |p| tape.value(p).item()),
    }
}

/// Objective terms for fixed noise, without gradients.
pub fn objective_terms<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Minibatch<'_, T>,
    noise: &Noise<T>,
    cfg: &TrainConfig,
) -> Result<ObjectiveTerms<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.params().iter().map(|t| tape.constant(t.clone())).collect();
    let v = build_objective(&mut tape, params.arch(), &vars, batch, noise, cfg)?;
    Ok(read_terms(&tape, &v))
}

/// Objective terms and the gradient of `total` for fixed noise.
pub fn objective_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Minibatch<'_, T>,
    noise: &Noise<T>,
    cfg: &TrainConfig,
) -> Result<(ObjectiveTerms<T>, ParamVector<T>)> {
    let mut tape = Tape::new();
    let vars = params.params().to_tape(&mut tape);
    let v = build_objective(&mut tape, params.arch(), &vars, batch, noise, cfg)?;
    let mut grads = tape.backward(v.total)?;
    let terms = read_terms(&tape, &v);
    Ok((terms, ParamVector::new(vars.iter().map(|&x| grads.take(x)).collect())))
}

/// Minibatch objective: mean source cross-entropy at one reparameterized
/// sample per example, plus the configured alignment penalty. Noise is
/// drawn from `rng`.
pub fn training_objective<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    batch: &Minibatch<'_, T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<T> {
    let noise = Noise::draw(rng, batch.source_x.rows(), params.arch().latent_dim);
    Ok(objective_terms(params, batch, &noise, cfg)?.total)
}

/// Labeled data evaluated after each epoch, for reporting only.
#[derive(Clone, Copy, Debug, Default)]
pub struct Monitor<'a, T> {
    pub source_val: Option<&'a Dataset<T>>,
    pub target_test: Option<&'a Dataset<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub rev_kl: f64,
    pub fwd_kl: f64,
    pub src_val_acc: Option<f64>,
    pub tgt_test_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub src_val_acc: Option<f64>,
    pub src_val_nll: Option<f64>,
    pub tgt_test_acc: Option<f64>,
    pub tgt_test_nll: Option<f64>,
}

/// The epoch with the highest source-validation accuracy (earliest on ties).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: Metrics,
    pub best_source_val: Option<BestEpoch>,
    /// Set when training stopped on a non-finite value; the returned
    /// parameters are then the last finite ones.
    pub divergence: Option<Divergence>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,rev_kl,fwd_kl,src_val_acc,tgt_test_acc";

impl TrainReport {
    /// One row per epoch; missing metrics are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            writeln!(s, "{},{},{},{},{},{}", r.epoch, r.train_loss, r.rev_kl, r.fwd_kl, opt(r.src_val_acc), opt(r.tgt_test_acc))
                .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Accuracy of the Monte Carlo predictive argmax and mean `-log` predictive
/// probability of the true label, using `rng` for the samples.
pub fn evaluate_with_rng<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    ensure!(!data.is_empty(), "cannot evaluate on an empty dataset");
    let labels = data.labels().ok_or_else(|| Error::contract("evaluation needs labels"))?;
    let bound = cfg.bound(params.arch().classes)?;
    let mut correct = 0usize;
    let mut nll = 0.0;
    // chunked to bound memory on large sets
    let chunk = 1024;
    for start in (0..data.len()).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(data.len())).collect();
        let x = data.inputs().select_rows(&idx);
        let p = predictive_batch(params, &x, cfg.eval_samples, bound.as_ref(), rng)?;
        for (r, &i) in idx.iter().enumerate() {
            let row = p.row_slice(r);
            let arg = row.iter().enumerate().fold(0, |best, (k, v)| if *v > row[best] { k } else { best });
            if arg == labels[i] {
                correct += 1;
            }
            let py = row[labels[i]].as_f64();
            if py <= 0.0 {
                return Err(Error::InfiniteLoss { class: labels[i] });
            }
            nll -= py.ln();
        }
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, nll / n))
}

/// [`evaluate_with_rng`] with the run's evaluation stream.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EVAL));
    evaluate_with_rng(params, data, cfg, &mut rng)
}

fn monitor_metrics<T: Scalar>(params: &ModelParams<T>, monitor: &Monitor<'_, T>, cfg: &TrainConfig) -> Result<Metrics> {
    let mut m = Metrics::default();
    if let Some(d) = monitor.source_val {
        let (a, l) = evaluate(params, d, cfg)?;
        m.src_val_acc = Some(a);
        m.src_val_nll = Some(l);
    }
    if let Some(d) = monitor.target_test {
        let (a, l) = evaluate(params, d, cfg)?;
        m.tgt_test_acc = Some(a);
        m.tgt_test_nll = Some(l);
    }
    Ok(m)
}

/// Minibatch KL estimates on held-out inputs: consecutive chunks of
/// `batch` rows from each set (ragged tails dropped), averaged.
pub fn heldout_kl<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    source_x: &Tensor<T>,
    target_x: &Tensor<T>,
    batch: usize,
    rng: &mut R,
) -> Result<KlTerms<f64>> {
    let n = source_x.rows().min(target_x.rows());
    let b = batch.min(n);
    ensure!(b >= 1, "held-out sets are empty");
    let chunks = n / b;
    let (mut rev, mut fwd) = (0.0, 0.0);
    let arch = params.arch();
    for c in 0..chunks {
        let idx: Vec<usize> = (c * b..(c + 1) * b).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.params().iter().map(|t| tape.constant(t.clone())).collect();
        let xs = tape.constant(source_x.select_rows(&idx));
        let xt = tape.constant(target_x.select_rows(&idx));
        let src = tape_encode(&mut tape, arch, &vars, xs);
        let tgt = tape_encode(&mut tape, arch, &vars, xt);
        let noise = Noise::<T>::draw(rng, b, arch.latent_dim);
        let zs = tape_sample_reparam(&mut tape, src, noise.source);
        let zt = tape_sample_reparam(&mut tape, tgt, noise.target);
        let (r, f) = tape_minibatch_kl(&mut tape, src, tgt, zs, zt);
        tape.check_finite()?;
        rev += tape.value(r).item().as_f64();
        fwd += tape.value(f).item().as_f64();
    }
    Ok(KlTerms { reverse: rev / chunks as f64, forward: fwd / chunks as f64 })
}

/// Runs `cfg.epochs` epochs of minibatch Adam on the training objective.
///
/// `target` must be unlabeled. `monitor` sets are evaluated after every
/// epoch for the report and never enter the objective. Training stops at
/// the first non-finite value, returning the last finite parameters with
/// `report.divergence` set.
pub fn fit<T: Scalar>(
    init: &ModelParams<T>,
    source: &Dataset<T>,
    target: &Dataset<T>,
    cfg: &TrainConfig,
    monitor: &Monitor<'_, T>,
) -> Result<(ModelParams<T>, TrainReport)> {
    let started = Instant::now();
    cfg.validate()?;
    ensure!(!source.is_empty() && !target.is_empty(), "training sets must be non-empty");
    ensure!(!target.is_labeled(), "target training data must be unlabeled");
    let labels = source.labels().ok_or_else(|| Error::contract("source training data must be labeled"))?;
    let arch = init.arch();
    ensure!(
        source.dim() == arch.input_dim && target.dim() == arch.input_dim,
        "input dimension mismatch: model {}, source {}, target {}",
        arch.input_dim,
        source.dim(),
        target.dim()
    );
    ensure!(source.classes() == arch.classes, "model has {} classes, data {}", arch.classes, source.classes());
    if cfg.epochs > 0 {
        ensure!(
            cfg.batch_size <= source.len() && cfg.batch_size <= target.len(),
            "batch size {} exceeds training set sizes ({} source, {} target)",
            cfg.batch_size,
            source.len(),
            target.len()
        );
    }
    cfg.bound(arch.classes)?;

    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut params = init.clone();
    let mut state = AdamState::new(params.params());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_NOISE));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestEpoch> = None;
    let mut divergence = None;
    let mut step = 0usize;

    'epochs: for epoch in 1..=cfg.epochs {
        let batches = minibatch_stream(source.len(), target.len(), cfg.batch_size, derive_seed(cfg.seed, STREAM_SHUFFLE + epoch as u64))?;
        let (mut loss, mut rev, mut fwd) = (0.0, 0.0, 0.0);
        for b in &batches {
            step += 1;
            let xs = source.inputs().select_rows(&b.source);
            let ys: Vec<usize> = b.source.iter().map(|&i| labels[i]).collect();
            let xt = target.inputs().select_rows(&b.target);
            let batch = Minibatch { source_x: &xs, source_y: &ys, target_x: &xt };
            let noise = Noise::draw(&mut noise_rng, b.source.len(), arch.latent_dim);
            let (terms, grads) = match objective_and_grad(&params, &batch, &noise, cfg) {
                Ok(v) => v,
                Err(e @ Error::NumericalOverflow { .. }) => {
                    divergence = Some(Divergence { epoch, step, message: e.to_string() });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let previous = params.params().clone();
            adam_step(params.params_mut(), &grads, &mut state, &adam)?;
            if !params.params().is_finite() {
                *params.params_mut() = previous;
                divergence = Some(Divergence { epoch, step, message: "non-finite parameters after the optimizer step".into() });
                break 'epochs;
            }
            loss += terms.total.as_f64();
            rev += terms.reverse_kl.as_f64();
            fwd += terms.forward_kl.as_f64();
        }
        let n = batches.len() as f64;
        let metrics = match monitor_metrics(&params, monitor, cfg) {
            Ok(m) => m,
            Err(e @ Error::NumericalOverflow { .. }) => {
                divergence = Some(Divergence { epoch, step, message: e.to_string() });
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        if let Some(acc) = metrics.src_val_acc {
            if best.as_ref().is_none_or(|b| acc > b.metrics.src_val_acc.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(BestEpoch { epoch, metrics: metrics.clone() });
            }
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss / n,
            rev_kl: rev / n,
            fwd_kl: fwd / n,
            src_val_acc: metrics.src_val_acc,
            tgt_test_acc: metrics.tgt_test_acc,
        });
    }

    let final_metrics = match monitor_metrics(&params, monitor, cfg) {
        Ok(m) => m,
        // finite but huge parameters can still overflow the evaluation
        Err(Error::NumericalOverflow { .. }) if divergence.is_some() => Metrics::default(),
        Err(e) => return Err(e),
    };
    let report = TrainReport {
        config_hash: cfg.hash(),
        epochs,
        final_metrics,
        best_source_val: best,
        divergence,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}
