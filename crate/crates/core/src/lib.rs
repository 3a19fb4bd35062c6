//! KL-guided domain adaptation.
//!
//! A probabilistic encoder `p(z|x)` and classifier `p̂(y|z)` are trained on a
//! labeled source domain and unlabeled target inputs, minimizing cross-entropy
//! plus a minibatch estimate of `KL[p_T(z) | p_S(z)]`. The [`theory`] module
//! checks the accompanying generalization bound exhaustively on discrete
//! instances.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! unsuffixed aliases at the crate root fix `f64`, which is what the trainer
//! and the CLI use.

pub mod baselines;
pub mod data;
pub mod distributions;
mod error;
pub mod gradients;
pub mod model;
pub mod objective;
mod scalar;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use baselines::KernelBank;
pub use data::{BatchIndices, DatasetMeta};
pub use distributions::KlTerms;
pub use gradients::{AdamConfig, Var};
pub use model::{Activation, Architecture, BoundConfig, Checkpoint, EncoderKind};
pub use objective::{Alignment, EpochRecord, Method, Metrics, TrainConfig, TrainReport};
pub use theory::{DiscreteDist, DiscreteScenario, VerifyReport};

pub type Tensor = gradients::Tensor<f64>;
pub type Tape = gradients::Tape<f64>;
pub type ParamVector = gradients::ParamVector<f64>;
pub type AdamState = gradients::AdamState<f64>;
pub type DiagGaussian = distributions::DiagGaussian<f64>;
pub type BatchMixture = distributions::BatchMixture<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type Dataset = data::Dataset<f64>;
pub type DomainPair = data::DomainPair<f64>;
pub type DomainSplit = data::DomainSplit<f64>;
pub type Monitor<'a> = objective::Monitor<'a, f64>;

pub type Tensor32 = gradients::Tensor<f32>;
pub type DiagGaussian32 = distributions::DiagGaussian<f32>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type Dataset32 = data::Dataset<f32>;
