//! The hardware-constrained training loop: composite loss with a gated
//! unipolarity penalty, differentiable activation search, alpha-blended
//! quantization, and export of the hardened network.

mod loss;
mod optim;
mod trainer;

pub use loss::{
    constraint_loss, constraint_loss_value, total_loss, ConstrainedWeight, ConstraintConfig, LossConfig, LossTerms,
    Ramp,
};
pub use optim::{Optimizer, OptimizerConfig};
pub use trainer::{
    calibrate_ranges, evaluate, export, harden_activations, train, write_metrics_csv, MetricsRow, TrainConfig, TrainOutcome,
};

use thiserror::Error;

use crate::harness::HarnessError;
use crate::model::{ActivationKind, ModelError};
use crate::quant::QuantError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: first offending layer `{layer}`")]
    NonFinite { step: usize, layer: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] HarnessError),
    #[error("cannot write metrics: {0}")]
    Metrics(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Hardens the relu / shifted-tanh mixture: the branch with the larger
/// logit wins, and an exact tie resolves to relu.
pub fn select_activation(act_logits: [f64; 2]) -> ActivationKind {
    if act_logits[1] > act_logits[0] {
        ActivationKind::ShiftedTanh
    } else {
        ActivationKind::Relu
    }
}

/// Blend factor at `step`: linear from 0 to 1 over the first `warmup`
/// fraction of a `steps`-long run, then 1.
pub fn alpha_at(step: usize, steps: usize, warmup: f64) -> f64 {
    let end = warmup * steps as f64;
    if end <= 0.0 {
        return 1.0;
    }
    (step as f64 / end).min(1.0)
}
