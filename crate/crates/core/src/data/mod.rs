//! Datasets, batching and augmentation.

mod augment;
mod cifar;
mod synthetic;

use rand::seq::SliceRandom;
use rand::Rng;

pub use augment::{mixup_batch, mixup_with, random_crop_flip, CropFlip};
pub use cifar::{
    encode_records, load_cifar10_bin, parse_records, read_records, record_len, write_records,
    CIFAR_IMAGE_SIZE, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
pub use synthetic::{gen_synthetic_textures, SyntheticConfig, TextureClass};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One labeled image with pixels in `[0, 1]`, laid out `[H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

/// An in-memory labeled image collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn new(records: Vec<ImageRecord>, num_classes: usize) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Format("dataset has no records".into()))?;
        let shape = first.pixels.shape().to_vec();
        if shape.len() != 3 || shape[0] != shape[1] {
            return Err(Error::Format(format!(
                "images must be square [H, W, C], got {shape:?}"
            )));
        }
        for (i, r) in records.iter().enumerate() {
            if r.pixels.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "record {i} has shape {:?}, expected {shape:?}",
                    r.pixels.shape()
                )));
            }
            if r.label >= num_classes {
                return Err(Error::Format(format!(
                    "record {i} has label {} >= {num_classes}",
                    r.label
                )));
            }
        }
        Ok(Self {
            records,
            num_classes,
            image_size: shape[0],
            channels: shape[2],
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population mean and standard deviation of every channel.
    pub fn from_dataset(data: &Dataset) -> Self {
        let c = data.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for r in &data.records {
            for px in r.pixels.data().chunks_exact(c) {
                for (ch, &v) in px.iter().enumerate() {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Self { mean, std }
    }

    /// The identity normalization.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Images `[B, H, W, C]` and target distributions `[B, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub targets: Tensor<T>,
}

impl<T: Real> Batch<T> {
    /// Normalized images and one-hot targets for `indices` of `data`.
    pub fn from_records(data: &Dataset, indices: &[usize], stats: &ChannelStats) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let (s, c, k) = (data.image_size, data.channels, data.num_classes);
        let mut pixels = Vec::with_capacity(indices.len() * s * s * c);
        let mut targets = vec![T::ZERO; indices.len() * k];
        for (row, &i) in indices.iter().enumerate() {
            let r = &data.records[i];
            for px in r.pixels.data().chunks_exact(c) {
                for (ch, &v) in px.iter().enumerate() {
                    pixels.push(T::from_f64((v as f64 - stats.mean[ch]) / stats.std[ch]));
                }
            }
            targets[row * k + r.label] = T::ONE;
        }
        Ok(Self {
            images: Tensor::new([indices.len(), s, s, c], pixels)?,
            targets: Tensor::new([indices.len(), k], targets)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest deviation of a target row sum from 1.
    pub fn target_row_error(&self) -> f64 {
        let k = self.targets.shape()[1];
        self.targets
            .data()
            .chunks_exact(k)
            .map(|r| (r.iter().map(|v| v.to_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// A seeded permutation of `0..n`.
pub fn shuffled_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Dataset {
        let records = (0..4)
            .map(|i| ImageRecord {
                pixels: Tensor::from_fn([2, 2, 3], |j| ((i * 12 + j) % 7) as f32 / 7.0),
                label: i % 3,
            })
            .collect();
        Dataset::new(records, 3).unwrap()
    }

    #[test]
    fn batches_are_normalized_and_one_hot() {
        let data = tiny();
        let stats = ChannelStats::from_dataset(&data);
        let b = Batch::<f64>::from_records(&data, &[0, 1, 2, 3], &stats).unwrap();
        assert_eq!(b.images.shape(), &[4, 2, 2, 3]);
        assert_eq!(b.target_row_error(), 0.0);
        for ch in 0..3 {
            let vals: Vec<f64> = b
                .images
                .data()
                .iter()
                .skip(ch)
                .step_by(3)
                .copied()
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(
                mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-4,
                "channel {ch}: {mean} {var}"
            );
        }
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let mut data = tiny();
        data.records[0].label = 3;
        assert!(matches!(
            Dataset::new(data.records, 3),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn shuffling_is_reproducible() {
        let a = shuffled_indices(50, &mut ChaCha8Rng::seed_from_u64(4));
        let b = shuffled_indices(50, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
