//! Datasets: CIFAR-10 binary batches, the raw tensor container, a seeded
//! synthetic generator, per-channel standardisation and augmentation.

mod augment;
mod cifar;
mod raw;
mod synth;

use std::fmt;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::{Error, Result, Scalar, Tensor};

pub use augment::{augment, augment_with, PAD};
pub use cifar::{load_cifar10, parse_cifar_records, CIFAR_RECORD_BYTES, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
pub use raw::{load_raw_container, save_raw_container};
pub use synth::{synth_blobs, BlobConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Images `N×C×H×W` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Hex SHA-256 of the source bytes (or of the generator parameters).
    pub fingerprint: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        images: Tensor<T>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        fingerprint: String,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample extent `C×H×W`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let images = self.images.gather_samples(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels, self.classes, split, self.fingerprint.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
            split: self.split,
            fingerprint: self.fingerprint.clone(),
        }
    }
}

/// A uniformly random `m`-subset of `0..n` (all of it when `m ≥ n`), in
/// ascending order.
pub fn seeded_subset<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if m < n {
        // partial Fisher–Yates: the first `m` entries are a uniform subset
        for i in 0..m {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(m);
        idx.sort_unstable();
    }
    idx
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn of<T: Scalar>(images: &Tensor<T>) -> Result<Self> {
        if images.rank() != 4 || images.numel() == 0 {
            return Err(Error::Data("channel statistics need a non-empty N×C×H×W tensor".into()));
        }
        let (n, c) = (images.shape()[0], images.shape()[1]);
        let hw = images.shape()[2] * images.shape()[3];
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, plane) in images.data().chunks(hw).enumerate() {
            let ch = i % c;
            for &v in plane {
                mean[ch] += v.to_f64_lossy();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for (i, plane) in images.data().chunks(hw).enumerate() {
            let ch = i % c;
            for &v in plane {
                sq[ch] += (v.to_f64_lossy() - mean[ch]).powi(2);
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt()).collect();
        Ok(ChannelStats { mean, std })
    }

    /// Maps each channel to zero mean and unit deviation; constant channels
    /// are only centred.
    pub fn apply<T: Scalar>(&self, images: &mut Tensor<T>) -> Result<()> {
        if images.rank() != 4 || images.shape()[1] != self.mean.len() {
            return Err(Error::Data(format!(
                "standardising {:?} with {} channel statistics",
                images.shape(),
                self.mean.len()
            )));
        }
        let c = self.mean.len();
        let hw = images.shape()[2] * images.shape()[3];
        for (i, plane) in images.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            let s = if self.std[ch] > 0.0 { self.std[ch] } else { 1.0 };
            for v in plane {
                *v = T::lit((v.to_f64_lossy() - self.mean[ch]) / s);
            }
        }
        Ok(())
    }
}

/// Standardises `train` with its own statistics and every other split with
/// the same numbers; returns the statistics used.
pub fn standardize<T: Scalar>(train: &mut Dataset<T>, others: &mut [&mut Dataset<T>]) -> Result<ChannelStats> {
    let stats = ChannelStats::of(&train.images)?;
    stats.apply(&mut train.images)?;
    for d in others.iter_mut() {
        stats.apply(&mut d.images)?;
    }
    Ok(stats)
}
