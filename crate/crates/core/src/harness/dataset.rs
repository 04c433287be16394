use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::tensor::Tensor;

/// Guard added to a channel's standard deviation before dividing.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-channel statistics a dataset was standardized with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Axis of the per-sample shape holding the channels.
    pub channel_axis: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N × sample_shape`.
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Splits,
    pub normalization: Option<Normalization>,
    /// Optional grouping key per sample (e.g. recording subject).
    pub groups: Option<Vec<u32>>,
}

impl Dataset {
    /// A dataset whose every sample belongs to the training split.
    pub fn new(samples: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.rank() < 2 || samples.shape()[0] != labels.len() {
            return Err(HarnessError::Format(format!(
                "{} labels for samples of shape {:?}",
                labels.len(),
                samples.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(HarnessError::Format(format!("label {bad} outside [0, {classes})")));
        }
        let n = labels.len();
        Ok(Self {
            samples,
            labels,
            classes,
            splits: Splits {
                train: (0..n).collect(),
                ..Splits::default()
            },
            normalization: None,
            groups: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.samples.gather_outer(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// Checks that the splits are disjoint and in bounds.
    pub fn validate_splits(&self) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for &i in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if i >= self.len() {
                return Err(HarnessError::Format(format!("split index {i} out of bounds")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(HarnessError::Format(format!("sample {i} appears in two splits")));
            }
        }
        Ok(())
    }

    /// Random split with the given validation and test fractions.
    pub fn split_random(&mut self, seed: u64, val_fraction: f64, test_fraction: f64) -> Result<()> {
        check_fractions(val_fraction, test_fraction)?;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = idx.len() as f64;
        let n_test = (n * test_fraction).round() as usize;
        let n_val = (n * val_fraction).round() as usize;
        let test = idx[..n_test].to_vec();
        let val = idx[n_test..n_test + n_val].to_vec();
        let train = idx[n_test + n_val..].to_vec();
        self.splits = sorted_splits(train, val, test);
        self.validate_splits()
    }

    /// Group-wise split: whole groups go to the test split, the remaining
    /// samples are divided randomly into train and validation.
    pub fn split_by_group(&mut self, seed: u64, val_fraction: f64, test_fraction: f64) -> Result<()> {
        check_fractions(val_fraction, test_fraction)?;
        let groups = self
            .groups
            .clone()
            .ok_or_else(|| HarnessError::Config("group split requested but samples carry no groups".into()))?;
        let mut ids: Vec<u32> = groups.clone();
        ids.sort_unstable();
        ids.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let n_test_groups = ((ids.len() as f64) * test_fraction).round().max(1.0) as usize;
        if n_test_groups >= ids.len() {
            return Err(HarnessError::Config(format!(
                "{} groups cannot be split into train and test",
                ids.len()
            )));
        }
        let test_ids = &ids[..n_test_groups];
        let (mut rest, mut test) = (Vec::new(), Vec::new());
        for (i, g) in groups.iter().enumerate() {
            if test_ids.contains(g) {
                test.push(i);
            } else {
                rest.push(i);
            }
        }
        rest.shuffle(&mut rng);
        let n_val = ((self.len() as f64) * val_fraction).round() as usize;
        let n_val = n_val.min(rest.len().saturating_sub(1));
        let val = rest[..n_val].to_vec();
        let train = rest[n_val..].to_vec();
        self.splits = sorted_splits(train, val, test);
        self.validate_splits()
    }

    /// Standardizes every channel with statistics of the training split.
    /// Fails when the dataset is already normalized.
    pub fn normalize_channels(&mut self, channel_axis: usize) -> Result<()> {
        if self.normalization.is_some() {
            return Err(HarnessError::Config("dataset is already normalized".into()));
        }
        let shape = self.sample_shape().to_vec();
        if channel_axis >= shape.len() {
            return Err(HarnessError::Config(format!(
                "channel axis {channel_axis} outside sample rank {}",
                shape.len()
            )));
        }
        if self.splits.train.is_empty() {
            return Err(HarnessError::Config("empty training split".into()));
        }
        let channels = shape[channel_axis];
        let inner: usize = shape[channel_axis + 1..].iter().product();
        let per_sample: usize = shape.iter().product();
        let channel_of = |e: usize| (e / inner) % channels;
        let data = self.samples.data();
        let mut sum = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        for &i in &self.splits.train {
            for (e, v) in data[i * per_sample..(i + 1) * per_sample].iter().enumerate() {
                sum[channel_of(e)] += v;
                count[channel_of(e)] += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        let mut sq = vec![0.0; channels];
        for &i in &self.splits.train {
            for (e, v) in data[i * per_sample..(i + 1) * per_sample].iter().enumerate() {
                let d = v - mean[channel_of(e)];
                sq[channel_of(e)] += d * d;
            }
        }
        let std: Vec<f64> = sq.iter().zip(&count).map(|(s, &c)| (s / c as f64).sqrt()).collect();
        for (k, v) in self.samples.data_mut().iter_mut().enumerate() {
            let c = channel_of(k % per_sample);
            *v = (*v - mean[c]) / (std[c] + NORM_EPS);
        }
        self.normalization = Some(Normalization {
            channel_axis,
            mean,
            std,
        });
        Ok(())
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn check_fractions(val: f64, test: f64) -> Result<()> {
    if !(0.0..1.0).contains(&val) || !(0.0..1.0).contains(&test) || val + test >= 1.0 {
        return Err(HarnessError::Config(format!(
            "split fractions val={val}, test={test} leave no training data"
        )));
    }
    Ok(())
}

fn sorted_splits(mut train: Vec<usize>, mut val: Vec<usize>, mut test: Vec<usize>) -> Splits {
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}
