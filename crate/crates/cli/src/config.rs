//! Run configuration: a flat TOML table, with `--set key=value` overrides
//! applied on top. Scenario keys are consumed here; every other key must be
//! a [`TrainConfig`] field.

use std::path::{Path, PathBuf};

use klda::data::cache_dir;
use klda::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

/// A configuration problem, reported with exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration `{}`: {}", self.field, self.message)
    }
}

fn err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.into(), message: message.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Mnist,
}

/// Which domains to build and which method to train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub method: Method,
    pub source_angle: f64,
    pub target_angle: f64,
    /// Blobs: points per class in each domain.
    pub n_per_class: usize,
    pub classes: usize,
    pub radius: f64,
    pub spread: f64,
    /// MNIST: images per domain before the 80/20 split.
    pub per_domain: usize,
    pub mnist_images: PathBuf,
    pub mnist_labels: PathBuf,
    pub train: TrainConfig,
}

const SCENARIO_KEYS: &[&str] = &[
    "dataset",
    "method",
    "source_angle",
    "target_angle",
    "n_per_class",
    "classes",
    "radius",
    "spread",
    "per_domain",
    "mnist_images",
    "mnist_labels",
];

/// IDX files under the cache directory, gzipped or not.
pub fn default_mnist_paths() -> (PathBuf, PathBuf) {
    let dir = cache_dir();
    let pick = |stem: &str| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    (pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"))
}

impl RunConfig {
    /// The small 2-D rotated-clusters profile.
    pub fn blobs() -> Self {
        let (mnist_images, mnist_labels) = default_mnist_paths();
        Self {
            dataset: DatasetKind::Blobs,
            method: Method::Kl,
            source_angle: 0.0,
            target_angle: 45.0,
            n_per_class: 200,
            classes: 2,
            radius: 1.0,
            spread: 0.5,
            per_domain: 2500,
            mnist_images,
            mnist_labels,
            // beta 0.3 lets the 2-D latent align clusters to the wrong mode
            train: TrainConfig {
                epochs: 200,
                latent_dim: 2,
                hidden: vec![16, 16],
                batch_size: 64,
                beta: 0.1,
                coral_coef: 10.0,
                mmd_coef: 1.0,
                ..TrainConfig::default()
            },
        }
    }

    /// RotatedMNIST subsample with the MLP encoder.
    pub fn mnist() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            classes: 10,
            source_angle: 0.0,
            target_angle: 30.0,
            train: TrainConfig::default(),
            ..Self::blobs()
        }
    }

    /// Builds a configuration from a TOML table. `dataset` picks the base
    /// profile; every other key overrides it.
    pub fn from_table(mut table: toml::Table) -> Result<Self, ConfigError> {
        let mut rc = match table.remove("dataset") {
            None => Self::blobs(),
            Some(toml::Value::String(s)) if s == "blobs" => Self::blobs(),
            Some(toml::Value::String(s)) if s == "mnist" => Self::mnist(),
            Some(v) => return Err(err("dataset", format!("expected \"blobs\" or \"mnist\", got {v}"))),
        };
        for key in SCENARIO_KEYS.iter().skip(1) {
            if let Some(v) = table.remove(*key) {
                rc.apply_scenario(key, v)?;
            }
        }
        // remaining keys are training fields, merged over the profile's
        let mut base = toml::Table::try_from(&rc.train).map_err(|e| err("train", e.to_string()))?;
        for (k, v) in table {
            base.insert(k, v);
        }
        rc.train = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let field = msg.split('`').nth(1).unwrap_or("train").to_string();
            err(&field, msg)
        })?;
        rc.train = rc.train.clone().with_method(rc.method);
        rc.validate()?;
        Ok(rc)
    }

    fn apply_scenario(&mut self, key: &str, v: toml::Value) -> Result<(), ConfigError> {
        let as_f64 = |v: &toml::Value| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)).ok_or_else(|| err(key, format!("expected a number, got {v}")));
        let as_usize = |v: &toml::Value| {
            v.as_integer().filter(|i| *i >= 0).map(|i| i as usize).ok_or_else(|| err(key, format!("expected a non-negative integer, got {v}")))
        };
        let as_str = |v: &toml::Value| v.as_str().map(str::to_string).ok_or_else(|| err(key, format!("expected a string, got {v}")));
        match key {
            "method" => {
                let s = as_str(&v)?;
                self.method = Method::parse(&s).ok_or_else(|| err(key, format!("unknown method `{s}` (erm, erm-prob, kl, coral, mmd)")))?;
            }
            "source_angle" => self.source_angle = as_f64(&v)?,
            "target_angle" => self.target_angle = as_f64(&v)?,
            "n_per_class" => self.n_per_class = as_usize(&v)?,
            "classes" => self.classes = as_usize(&v)?,
            "radius" => self.radius = as_f64(&v)?,
            "spread" => self.spread = as_f64(&v)?,
            "per_domain" => self.per_domain = as_usize(&v)?,
            "mnist_images" => self.mnist_images = PathBuf::from(as_str(&v)?),
            "mnist_labels" => self.mnist_labels = PathBuf::from(as_str(&v)?),
            _ => unreachable!("scenario key list"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| match e {
            klda::Error::Config { field, message } => err(&field, message),
            other => err("train", other.to_string()),
        })?;
        if !self.source_angle.is_finite() {
            return Err(err("source_angle", "must be finite"));
        }
        if !self.target_angle.is_finite() {
            return Err(err("target_angle", "must be finite"));
        }
        match self.dataset {
            DatasetKind::Blobs => {
                if self.classes < 2 {
                    return Err(err("classes", "need at least two classes"));
                }
                if self.n_per_class == 0 {
                    return Err(err("n_per_class", "must be positive"));
                }
                if !(self.spread > 0.0 && self.spread.is_finite()) {
                    return Err(err("spread", "must be positive"));
                }
                if !self.radius.is_finite() {
                    return Err(err("radius", "must be finite"));
                }
            }
            DatasetKind::Mnist => {
                if self.per_domain < 5 {
                    return Err(err("per_domain", "need at least 5 images per domain"));
                }
            }
        }
        Ok(())
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
pub fn parse_override(assignment: &str) -> Result<(String, toml::Value), ConfigError> {
    let (key, value) = assignment.split_once('=').ok_or_else(|| err(assignment, "expected key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(err(assignment, "empty key"));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

/// Reads the optional config file and layers the overrides over it.
pub fn resolve(config: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut table = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| err("config", format!("cannot read {}: {e}", path.display())))?;
            text.parse::<toml::Table>().map_err(|e| err("config", format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    RunConfig::from_table(table)
}
