//! Human-activity-recognition time series: CSV ingestion with windowing and
//! a seeded synthetic stand-in.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, HarnessError, Result};
use crate::model::{HAR_CHANNELS, HAR_CLASSES, HAR_WINDOW};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarOptions {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_window")]
    pub stride: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Column of the activity label; defaults to the one after the channels.
    #[serde(default)]
    pub label_column: Option<usize>,
    /// Column identifying the recording subject; enables subject-wise
    /// splits and keeps windows from straddling subjects.
    #[serde(default)]
    pub subject_column: Option<usize>,
    /// Fraction held out for validation.
    #[serde(default = "default_val")]
    pub val_fraction: f64,
    /// Fraction (of subjects when known, else of windows) held out for
    /// testing.
    #[serde(default = "default_test")]
    pub test_fraction: f64,
}

fn default_window() -> usize {
    HAR_WINDOW
}

fn default_channels() -> usize {
    HAR_CHANNELS
}

fn default_classes() -> usize {
    HAR_CLASSES
}

fn default_val() -> f64 {
    0.1
}

fn default_test() -> f64 {
    0.2
}

impl Default for HarOptions {
    fn default() -> Self {
        Self {
            window: HAR_WINDOW,
            stride: HAR_WINDOW,
            channels: HAR_CHANNELS,
            classes: HAR_CLASSES,
            label_column: None,
            subject_column: None,
            val_fraction: default_val(),
            test_fraction: default_test(),
        }
    }
}

struct Step {
    values: Vec<f64>,
    label: usize,
    subject: u32,
}

fn parse_cell<T: std::str::FromStr>(cell: &str, row: usize, col: usize) -> Result<T> {
    cell.trim().parse().map_err(|_| {
        HarnessError::Format(format!("row {row}, column {col}: cannot parse `{}`", cell.trim()))
    })
}

/// Majority label of a window; ties resolve to the smallest label.
fn majority(labels: impl Iterator<Item = usize>, classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for l in labels {
        counts[l] += 1;
    }
    let best = *counts.iter().max().unwrap_or(&0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

/// Parses CSV text whose rows are time steps: `channels` numeric columns,
/// an integer activity label, and optionally a subject id. A first row
/// that does not parse as numbers is treated as a header. Rows and columns
/// in error messages are 1-based.
pub fn parse_har_csv(text: &str, opts: &HarOptions) -> Result<Dataset> {
    if opts.window == 0 || opts.stride == 0 || opts.channels == 0 || opts.classes == 0 {
        return Err(HarnessError::Config("window, stride, channels and classes must be positive".into()));
    }
    let label_col = opts.label_column.unwrap_or(opts.channels);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut steps = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| HarnessError::Format(format!("row {row}: {e}")))?;
        if i == 0 && rec.get(0).is_some_and(|c| c.trim().parse::<f64>().is_err()) {
            continue;
        }
        let cell = |col: usize| {
            rec.get(col)
                .ok_or_else(|| HarnessError::Format(format!("row {row}, column {}: missing", col + 1)))
        };
        let mut values = Vec::with_capacity(opts.channels);
        for col in 0..opts.channels {
            values.push(parse_cell::<f64>(cell(col)?, row, col + 1)?);
        }
        let label: usize = parse_cell(cell(label_col)?, row, label_col + 1)?;
        if label >= opts.classes {
            return Err(HarnessError::Format(format!(
                "row {row}, column {}: label {label} outside [0, {})",
                label_col + 1,
                opts.classes
            )));
        }
        let subject = match opts.subject_column {
            Some(c) => parse_cell(cell(c)?, row, c + 1)?,
            None => 0,
        };
        steps.push(Step { values, label, subject });
    }

    let (w, ch) = (opts.window, opts.channels);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut start = 0;
    while start < steps.len() {
        let subject = steps[start].subject;
        let end = steps[start..]
            .iter()
            .position(|s| s.subject != subject)
            .map_or(steps.len(), |p| start + p);
        let mut s = start;
        while s + w <= end {
            let win = &steps[s..s + w];
            for c in 0..ch {
                samples.extend(win.iter().map(|step| step.values[c]));
            }
            labels.push(majority(win.iter().map(|st| st.label), opts.classes));
            groups.push(subject);
            s += opts.stride;
        }
        start = end;
    }
    if labels.is_empty() {
        return Err(HarnessError::Format(format!(
            "{} time steps yield no complete window of {w}",
            steps.len()
        )));
    }
    let n = labels.len();
    let mut data = Dataset::new(Tensor::new(vec![n, ch, w], samples)?, labels, opts.classes)?;
    data.groups = Some(groups);
    Ok(data)
}

/// Loads a HAR CSV file, splits it (subject-wise when subjects are known)
/// and z-normalizes every channel with training statistics.
pub fn load_har_csv(path: &Path, opts: &HarOptions, seed: u64) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut data = parse_har_csv(&text, opts)?;
    if opts.subject_column.is_some() {
        data.split_by_group(seed, opts.val_fraction, opts.test_fraction)?;
    } else {
        data.split_random(seed, opts.val_fraction, opts.test_fraction)?;
    }
    data.normalize_channels(0)?;
    Ok(data)
}

/// Seeded synthetic HAR windows of shape `9 × 100`.
///
/// Every (class, channel) pair owns a template made of two sinusoids with
/// class-dependent frequencies (1–13 cycles per window), amplitudes and
/// phases drawn once from the seed. A sample is its class template with a
/// random phase jitter of standard deviation `0.3·noise` radians plus white
/// Gaussian noise of standard deviation `noise`. Labels cycle through the
/// classes, so class sizes differ by at most one. The result is split
/// 70/15/15 at random and z-normalized per channel.
pub fn synth_har(seed: u64, n: usize, classes: usize, noise: f64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(HarnessError::Config(format!("{n} samples cannot cover {classes} classes")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(HarnessError::Config(format!("noise {noise} must be non-negative")));
    }
    let (ch, w) = (HAR_CHANNELS, HAR_WINDOW);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    // (frequency, amplitude, phase) × 2 per class and channel
    let templates: Vec<[(f64, f64, f64); 2]> = (0..classes * ch)
        .map(|_| {
            let mut part = || {
                (
                    f64::from(rng.random_range(1..=13u32)),
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.0..tau),
                )
            };
            [part(), part()]
        })
        .collect();
    let jitter = Normal::new(0.0, 0.3 * noise).expect("non-negative deviation");
    let white = Normal::new(0.0, noise).expect("non-negative deviation");
    let mut samples = Vec::with_capacity(n * ch * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let shift = if noise > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
        for c in 0..ch {
            let parts = &templates[k * ch + c];
            for t in 0..w {
                let time = t as f64 / w as f64;
                let clean: f64 = parts.iter().map(|(f, a, p)| a * (tau * f * time + p + shift).sin()).sum();
                let e = if noise > 0.0 { white.sample(&mut rng) } else { 0.0 };
                samples.push(clean + e);
            }
        }
        labels.push(k);
    }
    let mut data = Dataset::new(Tensor::new(vec![n, ch, w], samples)?, labels, classes)?;
    data.split_random(seed, 0.15, 0.15)?;
    data.normalize_channels(0)?;
    Ok(data)
}
