//! Builds the source/target domains for a run and trains one seed.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use klda::data::{load_idx, make_rotated_blobs, rotated_mnist_domains};
use klda::objective::{derive_seed, fit, heldout_kl, Monitor};
use klda::{Dataset, DomainPair, DomainSplit, KlTerms, ModelParams, TrainReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, RunConfig};

pub const STREAM_DATA_SOURCE: u64 = 101;
pub const STREAM_DATA_TARGET: u64 = 102;
pub const STREAM_SPLIT: u64 = 103;
pub const STREAM_HELDOUT: u64 = 104;

fn mnist_pool(images: &PathBuf, labels: &PathBuf) -> klda::Result<Arc<Dataset>> {
    // Loaded once per process; runs for many seeds and methods share it.
    static CACHE: OnceLock<Mutex<HashMap<(PathBuf, PathBuf), Arc<Dataset>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (images.clone(), labels.clone());
    if let Some(d) = cache.lock().expect("cache lock").get(&key) {
        return Ok(d.clone());
    }
    let d = Arc::new(load_idx::<f64>(images, labels)?);
    cache.lock().expect("cache lock").insert(key, d.clone());
    Ok(d)
}

/// Source and target domains for `seed`. Depends only on the scenario keys
/// and the seed, so every method sees the same data.
pub fn build_pair(rc: &RunConfig, seed: u64) -> klda::Result<DomainPair> {
    match rc.dataset {
        DatasetKind::Blobs => {
            let gen = |angle, stream| make_rotated_blobs(rc.n_per_class, rc.classes, rc.radius, rc.spread, angle, derive_seed(seed, stream));
            DomainPair::new(gen(rc.source_angle, STREAM_DATA_SOURCE)?, gen(rc.target_angle, STREAM_DATA_TARGET)?)
        }
        DatasetKind::Mnist => {
            let pool = mnist_pool(&rc.mnist_images, &rc.mnist_labels)?;
            let mut domains =
                rotated_mnist_domains(&pool, &[rc.source_angle, rc.target_angle], rc.per_domain, derive_seed(seed, STREAM_DATA_SOURCE))?;
            let target = domains.pop().expect("two domains");
            let source = domains.pop().expect("two domains");
            DomainPair::new(source, target)
        }
    }
}

/// Summary numbers of one trained seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub tgt_test_acc: f64,
    pub src_val_acc: f64,
    pub best_epoch: Option<usize>,
    pub best_tgt_test_acc: Option<f64>,
    pub heldout_rev_kl: f64,
    pub heldout_fwd_kl: f64,
    pub diverged: bool,
}

pub struct SeedRun {
    pub params: ModelParams,
    pub report: TrainReport,
    pub summary: SeedSummary,
    pub split: DomainSplit,
}

/// Splits the domains 80/20, trains on the source-train and unlabeled
/// target-train parts, and evaluates on source-val and target-test.
pub fn run_seed(rc: &RunConfig, seed: u64) -> klda::Result<SeedRun> {
    let cfg = klda::TrainConfig { seed, ..rc.train.clone() };
    let pair = build_pair(rc, seed)?;
    let split = pair.split(derive_seed(seed, STREAM_SPLIT))?;
    let arch = cfg.architecture(split.source_train.dim(), split.source_train.classes());
    let init = ModelParams::init(arch, derive_seed(seed, klda::objective::STREAM_INIT))?;
    let monitor = Monitor { source_val: Some(&split.source_val), target_test: Some(&split.target_test) };
    let (params, report) = fit(&init, &split.source_train, &split.target_train, &cfg, &monitor)?;
    let kl = if report.divergence.is_some() {
        KlTerms { reverse: f64::NAN, forward: f64::NAN }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_HELDOUT));
        heldout_kl(&params, split.source_val.inputs(), split.target_test.inputs(), cfg.batch_size, &mut rng)?
    };
    let summary = SeedSummary {
        seed,
        tgt_test_acc: report.final_metrics.tgt_test_acc.unwrap_or(f64::NAN),
        src_val_acc: report.final_metrics.src_val_acc.unwrap_or(f64::NAN),
        best_epoch: report.best_source_val.as_ref().map(|b| b.epoch),
        best_tgt_test_acc: report.best_source_val.as_ref().and_then(|b| b.metrics.tgt_test_acc),
        heldout_rev_kl: kl.reverse,
        heldout_fwd_kl: kl.forward,
        diverged: report.divergence.is_some(),
    };
    Ok(SeedRun { params, report, summary, split })
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => s[n / 2],
        _ => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}
