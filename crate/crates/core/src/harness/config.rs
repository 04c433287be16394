use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CifarOptions, HarOptions, HarnessError, Result};
use crate::crossbar::DeploymentConfig;
use crate::model::{ActivationKind, Polarity, RangeSharing};
use crate::quant::{MAX_BITS, MIN_BITS};
use crate::train::TrainConfig;

/// Environment variable naming the directory relative data paths resolve
/// against.
pub const DATA_ROOT_ENV: &str = "CIMTRAIN_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitsConfig {
    #[serde(default = "four")]
    pub weights: u8,
    #[serde(default = "four")]
    pub activations: u8,
    #[serde(default = "eight")]
    pub bias: u8,
    /// Converter resolutions used for the cost estimate; each must be at
    /// least the activation width it carries.
    #[serde(default = "four")]
    pub dac: u8,
    #[serde(default = "four")]
    pub adc: u8,
}

fn four() -> u8 {
    4
}

fn eight() -> u8 {
    8
}

impl Default for BitsConfig {
    fn default() -> Self {
        Self {
            weights: 4,
            activations: 4,
            bias: 8,
            dac: 4,
            adc: 4,
        }
    }
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    SynthHar {
        #[serde(default = "synth_samples")]
        samples: usize,
        #[serde(default = "synth_noise")]
        noise: f64,
    },
    HarCsv {
        path: PathBuf,
        #[serde(default)]
        options: HarOptions,
    },
    /// CIFAR-10 binary batches. Unless `--full` is given, runs use the
    /// desk-scale subset set by `options` (10 000 training and 2 000 test
    /// records by default).
    Cifar10 {
        path: PathBuf,
        #[serde(default = "desk_cifar")]
        options: CifarOptions,
    },
    /// Generated class-conditional images in CIFAR-10 binary format.
    SynthCifar {
        #[serde(default = "synth_cifar_samples")]
        samples: usize,
        #[serde(default = "synth_cifar_noise")]
        noise: f64,
        #[serde(default)]
        options: CifarOptions,
    },
}

fn desk_cifar() -> CifarOptions {
    CifarOptions {
        train_limit: Some(10_000),
        test_limit: Some(2_000),
        ..CifarOptions::default()
    }
}

fn synth_samples() -> usize {
    2000
}

fn synth_noise() -> f64 {
    2.0
}

fn synth_cifar_samples() -> usize {
    3000
}

fn synth_cifar_noise() -> f64 {
    0.15
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::SynthHar {
            samples: synth_samples(),
            noise: synth_noise(),
        }
    }
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `har`, `cifar10`, or the path of a network description file.
    #[serde(default = "default_network")]
    pub network: String,
    #[serde(default)]
    pub bits: BitsConfig,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    #[serde(default)]
    pub polarity: Polarity,
    #[serde(default)]
    pub range_sharing: RangeSharing,
    /// Unipolar fractions visited by the sweep.
    #[serde(default = "default_fractions")]
    pub sweep_fractions: Vec<f64>,
    /// Side of the square CIFAR-10 input fed to the reference CNN.
    #[serde(default = "default_cifar_input")]
    pub cifar_input: usize,
    #[serde(default = "default_har_hidden")]
    pub har_hidden: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    /// Step budget used instead of `train.steps` when running with `--full`.
    #[serde(default)]
    pub full_steps: Option<usize>,
    #[serde(default)]
    pub deployment: DeploymentConfig,
    /// Optional periphery catalog file overriding the built-in figures.
    #[serde(default)]
    pub catalog: Option<PathBuf>,
    /// Samples compared in the crossbar exactness check.
    #[serde(default = "default_check_samples")]
    pub check_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_network() -> String {
    "har".into()
}

fn default_activation() -> ActivationKind {
    ActivationKind::Mix
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_cifar_input() -> usize {
    16
}

fn default_har_hidden() -> usize {
    145
}

fn default_train() -> TrainConfig {
    TrainConfig::new(600)
}

fn default_check_samples() -> usize {
    64
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

fn bits_ok(name: &str, b: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&b) {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{name} bits {b} outside [{MIN_BITS}, {MAX_BITS}]")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment configs always serialize")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bits;
        bits_ok("weight", b.weights)?;
        bits_ok("activation", b.activations)?;
        bits_ok("bias", b.bias)?;
        for (name, conv) in [("DAC", b.dac), ("ADC", b.adc)] {
            if conv != 4 && conv != 8 {
                return Err(HarnessError::Config(format!("{name} resolution {conv} not in the catalog (4 or 8)")));
            }
            if conv < b.activations {
                return Err(HarnessError::Config(format!(
                    "{name} resolution {conv} below the {}-bit activation grid",
                    b.activations
                )));
            }
        }
        self.polarity.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(f) = self.sweep_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(HarnessError::Config(format!("sweep fraction {f} outside [0, 1]")));
        }
        if self.cifar_input == 0 || 32 % self.cifar_input != 0 {
            return Err(HarnessError::Config(format!("cifar_input {} must divide 32", self.cifar_input)));
        }
        if self.har_hidden == 0 || self.check_samples == 0 {
            return Err(HarnessError::Config("har_hidden and check_samples must be positive".into()));
        }
        if self.full_steps == Some(0) {
            return Err(HarnessError::Config("full_steps must be positive".into()));
        }
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.deployment.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Resolves a data path against the data-root environment variable.
    pub fn resolve_data_path(path: &Path) -> PathBuf {
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) if path.is_relative() => PathBuf::from(root).join(path),
            _ => path.to_path_buf(),
        }
    }
}
