//! Datasets: synthetic generators, IDX files, and model checkpoints.

pub mod checkpoint;
pub mod idx;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset size {n}: need at least {min} samples")]
    InvalidSize { n: usize, min: usize },
    #[error("bad magic number in {file}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        file: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("truncated {file}: expected {expected} bytes, found {found}")]
    Truncated {
        file: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{file} has {extra} unexpected trailing bytes")]
    TrailingBytes { file: &'static str, extra: usize },
    #[error("image file holds {images} images but label file holds {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Labelled samples with a uniform per-sample shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, sample...]`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        let n = inputs.shape()[0];
        if n == 0 || inputs.shape().len() < 2 {
            return Err(DataError::Invalid(format!(
                "inputs need a batch axis and at least one sample, got {:?}",
                inputs.shape()
            )));
        }
        if labels.len() != n {
            return Err(DataError::Invalid(format!(
                "{} labels for {n} samples",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} not below num_classes {num_classes}"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered batch"), labels)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Desk-scale synthetic classification tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticTask {
    /// Two interleaved half circles in 2-D.
    TwoMoons,
    /// Three well separated isotropic Gaussian clusters in 2-D.
    GaussianBlobs,
    /// `channels×side×side` images of sinusoidal stripes; the class is the
    /// stripe orientation (horizontal, vertical, diagonal, anti-diagonal).
    StripedImages {
        channels: usize,
        side: usize,
        noise: f64,
    },
}

impl SyntheticTask {
    pub fn num_classes(&self) -> usize {
        match self {
            Self::TwoMoons => 2,
            Self::GaussianBlobs => 3,
            Self::StripedImages { .. } => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::TwoMoons => "two_moons",
            Self::GaussianBlobs => "gaussian_blobs",
            Self::StripedImages { .. } => "striped_images",
        }
    }
}

/// Generates `n` samples deterministically from `seed`. Labels are balanced
/// (counts differ by at most one) and shuffled.
pub fn gen_synthetic(task: SyntheticTask, n: usize, seed: u64) -> Result<Dataset, DataError> {
    let classes = task.num_classes();
    if n < classes {
        return Err(DataError::InvalidSize { n, min: classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let inputs = match task {
        SyntheticTask::TwoMoons => {
            let noise = Normal::new(0.0, 0.1).unwrap();
            let mut data = Vec::with_capacity(2 * n);
            for &label in &labels {
                let t = rng.random_range(0.0..PI);
                let (x, y) = if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                data.push(x + noise.sample(&mut rng));
                data.push(y + noise.sample(&mut rng));
            }
            Tensor::new(vec![n, 2], data)?
        }
        SyntheticTask::GaussianBlobs => {
            let noise = Normal::new(0.0, 0.5).unwrap();
            let mut data = Vec::with_capacity(2 * n);
            for &label in &labels {
                let angle = 2.0 * PI * label as f64 / 3.0;
                data.push(4.0 * angle.cos() + noise.sample(&mut rng));
                data.push(4.0 * angle.sin() + noise.sample(&mut rng));
            }
            Tensor::new(vec![n, 2], data)?
        }
        SyntheticTask::StripedImages {
            channels,
            side,
            noise,
        } => {
            if channels == 0 || side < 2 || noise.is_nan() || noise < 0.0 {
                return Err(DataError::Invalid(format!(
                    "striped_images needs channels ≥ 1, side ≥ 2 and noise ≥ 0, got \
                     {channels}, {side}, {noise}"
                )));
            }
            let noise = Normal::new(0.0, noise).unwrap();
            let per = channels * side * side;
            let mut data = Vec::with_capacity(n * per);
            for &label in &labels {
                let phase = rng.random_range(0.0..2.0 * PI);
                let period = rng.random_range(2.5..4.5);
                let amplitude = rng.random_range(0.6..1.0);
                for _ in 0..channels {
                    let gain = rng.random_range(0.7..1.3);
                    for y in 0..side {
                        for x in 0..side {
                            let coord = match label {
                                0 => y as f64,
                                1 => x as f64,
                                2 => (x + y) as f64 / 2f64.sqrt(),
                                _ => (x as f64 - y as f64) / 2f64.sqrt(),
                            };
                            let v = amplitude * gain * (2.0 * PI * coord / period + phase).sin();
                            data.push(v + noise.sample(&mut rng));
                        }
                    }
                }
            }
            Tensor::new(vec![n, channels, side, side], data)?
        }
    };
    Dataset::new(inputs, labels, classes, Split::Train)
}
