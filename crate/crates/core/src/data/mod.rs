//! Datasets: in-memory image classification data, synthetic generators, and
//! the CIFAR-10 binary reader.

mod cifar;
mod synthetic;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use cifar::{
    load_cifar10_binary, read_cifar10_records, CIFAR_MEAN, CIFAR_RECORD_BYTES, CIFAR_STD,
};
pub use synthetic::make_synthetic;

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Images stored channel-first, one after another.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Ok(Batch {
            images: Tensor::new(
                vec![indices.len(), self.channels, self.height, self.width],
                data,
            )?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Index batches covering the whole set once; the last may be short.
    /// `shuffle_key` selects a seeded permutation; `None` keeps file order.
    pub fn batch_indices(
        &self,
        batch_size: usize,
        shuffle_key: Option<(u64, u64)>,
    ) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some((seed, epoch)) = shuffle_key {
            order.shuffle(&mut stream(seed, Purpose::Shuffle, epoch, 0));
        }
        order
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * self.sample_len());
        }
    }

    /// `(x - mean[c]) / std[c]` per channel.
    pub fn normalize(&mut self, norm: &Normalization) -> Result<()> {
        if norm.mean.len() != self.channels || norm.std.len() != self.channels {
            return Err(Error::Config(format!(
                "normalization needs {} channels, got mean {} / std {}",
                self.channels,
                norm.mean.len(),
                norm.std.len()
            )));
        }
        if norm.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        let plane = self.height * self.width;
        for (i, v) in self.images.iter_mut().enumerate() {
            let c = (i / plane) % self.channels;
            *v = (*v - norm.mean[c]) / norm.std[c];
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "synthetic-blobs")]
    SyntheticBlobs,
    #[serde(rename = "synthetic-spirals")]
    SyntheticSpirals,
    #[serde(rename = "cifar10-binary")]
    Cifar10Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Directory holding the CIFAR-10 `*.bin` batches.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of additive pixel noise for synthetic kinds.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Records kept per CIFAR file.
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

fn default_noise() -> f64 {
    0.8
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticSpirals,
            path: None,
            classes: 4,
            train_samples: 512,
            test_samples: 512,
            image_size: 8,
            channels: 3,
            noise: default_noise(),
            subset: None,
            normalization: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::Cifar10Binary => {
                if self.path.is_none() {
                    return Err(Error::Config(
                        "data.path is required for cifar10-binary".into(),
                    ));
                }
            }
            _ => {
                if self.classes < 2 || self.train_samples == 0 || self.test_samples == 0 {
                    return Err(Error::Config(
                        "synthetic data needs at least 2 classes and non-empty splits".into(),
                    ));
                }
                if self.image_size < 4 || self.channels == 0 {
                    return Err(Error::Config(
                        "image_size must be >= 4 and channels > 0".into(),
                    ));
                }
                if !(self.noise >= 0.0) {
                    return Err(Error::Config("noise must be non-negative".into()));
                }
            }
        }
        Ok(())
    }

    /// Materializes both splits, applying subset and normalization.
    pub fn load(&self, seed: u64) -> Result<Split> {
        self.validate()?;
        let mut split = match self.kind {
            DatasetKind::Cifar10Binary => {
                let path = self.path.as_ref().expect("validated");
                load_cifar10_binary(path, self.subset)?
            }
            _ => make_synthetic(self, seed)?,
        };
        if let Some(norm) = &self.normalization {
            split.train.normalize(norm)?;
            split.test.normalize(norm)?;
        }
        Ok(split)
    }
}
