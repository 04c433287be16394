//! Datasets, experiment configuration and the train → map → estimate →
//! report pipelines behind the command-line tool.

mod cifar;
mod config;
mod dataset;
mod har;
mod pipeline;

pub use cifar::{
    load_cifar10, parse_cifar_records, synth_cifar_records, CifarOptions, CIFAR_RECORD, CIFAR_SIDE, CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
};
pub use dataset::{Dataset, Normalization, Splits, NORM_EPS};
pub use config::{BitsConfig, DataConfig, ExperimentConfig, DATA_ROOT_ENV};
pub use har::{load_har_csv, parse_har_csv, synth_har, HarOptions};
pub use pipeline::{
    build_network, check_exactness, load_catalog, load_model, prepare_dataset, report_text, run_estimate,
    run_estimate_preset, run_map, run_report, run_sweep, run_train, train_experiment, ExactnessCheck, MapSummary,
    Report, RunManifest, SplitSummary, SweepRow, TrainRun, TrainSummary, CONFIG_FILE, COST_JSON, COST_TEXT,
    DEPLOYMENT_FILE, METRICS_FILE, MODEL_FILE, REPORT_JSON, REPORT_TEXT, SWEEP_FILE, TRAIN_FILE, VERSION,
};

use thiserror::Error;

use crate::cost::CostError;
use crate::crossbar::DeploymentError;
use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(Box<TrainError>),
    #[error(transparent)]
    Deployment(#[from] DeploymentError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(inner) => inner,
            other => HarnessError::Train(Box::new(other)),
        }
    }
}

impl HarnessError {
    /// Process exit code: 2 for configuration errors, 3 for invariant
    /// violations, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Train(e) if matches!(**e, TrainError::Config(_)) => 2,
            HarnessError::Invariant(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
