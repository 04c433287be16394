//! CIFAR-10 binary batches: one label byte followed by 3072 pixel bytes
//! (1024 red, 1024 green, 1024 blue, each row-major 32×32) per record.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, HarnessError, Result, Splits};
use crate::model::CIFAR_CLASSES;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarOptions {
    /// Keep at most this many training records (in file order).
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Keep at most this many test records.
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Average-pool the images by this integer factor (1 keeps 32×32).
    #[serde(default = "one")]
    pub downsample: usize,
    /// Fraction of the training records held out for validation.
    #[serde(default = "default_val")]
    pub val_fraction: f64,
}

fn one() -> usize {
    1
}

fn default_val() -> f64 {
    0.1
}

impl Default for CifarOptions {
    fn default() -> Self {
        Self {
            train_limit: None,
            test_limit: None,
            downsample: 1,
            val_fraction: default_val(),
        }
    }
}

/// One decoded record: label and `32×32×3` pixels scaled to `[0, 1]`.
pub fn parse_cifar_records(bytes: &[u8], origin: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(HarnessError::Format(format!(
            "{origin}: truncated record at byte offset {offset} ({} of {CIFAR_RECORD} bytes)",
            bytes.len() - offset
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3 * plane);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = usize::from(rec[0]);
        if label >= CIFAR_CLASSES {
            return Err(HarnessError::Format(format!(
                "{origin}: label {label} at byte offset {} outside [0, {CIFAR_CLASSES})",
                i * CIFAR_RECORD
            )));
        }
        labels.push(label);
        // planar RGB → interleaved HWC
        for p in 0..plane {
            for c in 0..3 {
                pixels.push(f64::from(rec[1 + c * plane + p]) / 255.0);
            }
        }
    }
    Ok((labels, pixels))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn downsample(pixels: &[f64], n: usize, factor: usize) -> Vec<f64> {
    let side = CIFAR_SIDE / factor;
    let mut out = vec![0.0; n * side * side * 3];
    let norm = (factor * factor) as f64;
    for s in 0..n {
        for y in 0..CIFAR_SIDE {
            for x in 0..CIFAR_SIDE {
                for c in 0..3 {
                    let src = ((s * CIFAR_SIDE + y) * CIFAR_SIDE + x) * 3 + c;
                    let dst = ((s * side + y / factor) * side + x / factor) * 3 + c;
                    out[dst] += pixels[src] / norm;
                }
            }
        }
    }
    out
}

/// Loads the binary batches from a directory (`data_batch_*.bin` for
/// training, `test_batch.bin` for testing) or a single batch file, which
/// is then split randomly.
pub fn load_cifar10(path: &Path, opts: &CifarOptions, seed: u64) -> Result<Dataset> {
    if opts.downsample == 0 || CIFAR_SIDE % opts.downsample != 0 {
        return Err(HarnessError::Config(format!(
            "downsample factor {} must divide {CIFAR_SIDE}",
            opts.downsample
        )));
    }
    let (train_files, test_files): (Vec<PathBuf>, Vec<PathBuf>) = if path.is_dir() {
        let train: Vec<PathBuf> = CIFAR_TRAIN_FILES.iter().map(|f| path.join(f)).filter(|p| p.exists()).collect();
        let test: Vec<PathBuf> = Some(path.join(CIFAR_TEST_FILE)).into_iter().filter(|p| p.exists()).collect();
        if train.is_empty() {
            return Err(HarnessError::Config(format!("no CIFAR-10 training batches in {}", path.display())));
        }
        (train, test)
    } else {
        (vec![path.to_path_buf()], Vec::new())
    };
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let load = |files: &[PathBuf], limit: Option<usize>, labels: &mut Vec<usize>, pixels: &mut Vec<f64>| {
        let start = labels.len();
        for f in files {
            if limit.is_some_and(|l| labels.len() - start >= l) {
                break;
            }
            let (l, p) = parse_cifar_records(&read(f)?, &f.display().to_string())?;
            labels.extend(l);
            pixels.extend(p);
        }
        if let Some(l) = limit {
            let keep = start + l.min(labels.len() - start);
            labels.truncate(keep);
            pixels.truncate(keep * 3 * CIFAR_SIDE * CIFAR_SIDE);
        }
        Ok::<usize, HarnessError>(labels.len() - start)
    };
    let n_train = load(&train_files, opts.train_limit, &mut labels, &mut pixels)?;
    let n_test = load(&test_files, opts.test_limit, &mut labels, &mut pixels)?;
    let n = n_train + n_test;
    let side = CIFAR_SIDE / opts.downsample;
    if opts.downsample > 1 {
        pixels = downsample(&pixels, n, opts.downsample);
    }
    let samples = Tensor::new(vec![n, side, side, 3], pixels)?;
    let mut data = Dataset::new(samples, labels, CIFAR_CLASSES)?;
    if n_test == 0 {
        data.split_random(seed, opts.val_fraction, 0.2)?;
    } else {
        let mut d = Dataset::new(
            data.samples.slice_outer(0, n_train)?,
            data.labels[..n_train].to_vec(),
            CIFAR_CLASSES,
        )?;
        d.split_random(seed, opts.val_fraction, 0.0)?;
        data.splits = Splits {
            train: d.splits.train,
            val: d.splits.val,
            test: (n_train..n).collect(),
        };
        data.validate_splits()?;
    }
    Ok(data)
}

/// Class-conditional 32×32 colour images in CIFAR-10 binary format, for
/// desk-scale runs without the real data.
///
/// Class `k` has its own base colour and a stripe pattern whose
/// orientation and spatial frequency depend on `k`; every image adds a
/// random phase shift and Gaussian pixel noise of standard deviation
/// `noise` (in units of full scale).
pub fn synth_cifar_records(seed: u64, n: usize, noise: f64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("non-negative deviation");
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(n * CIFAR_RECORD);
    for i in 0..n {
        let k = i % CIFAR_CLASSES;
        out.push(k as u8);
        let hue = k as f64 / CIFAR_CLASSES as f64 * std::f64::consts::TAU;
        let base = [0.5 + 0.3 * hue.cos(), 0.5 + 0.3 * (hue + 2.1).cos(), 0.5 + 0.3 * (hue + 4.2).cos()];
        let angle = (k % 5) as f64 * std::f64::consts::PI / 5.0;
        let freq = 1.0 + (k / 5) as f64 * 1.5;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (ca, sa) = (angle.cos(), angle.sin());
        let mut rec = vec![0u8; 3 * plane];
        for y in 0..CIFAR_SIDE {
            for x in 0..CIFAR_SIDE {
                let u = (x as f64 * ca + y as f64 * sa) / CIFAR_SIDE as f64;
                let stripe = 0.2 * (std::f64::consts::TAU * freq * u + phase).sin();
                for (c, b) in base.iter().enumerate() {
                    let v = b + stripe + if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    rec[c * plane + y * CIFAR_SIDE + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        out.extend(rec);
    }
    out
}
