//! Labeled image pools and split-typed views over them.
//!
//! Training code only ever receives [`Split`]s. The held-out test portion is
//! a [`TestSplit`], whose samples can be read only through the evaluation
//! functions in [`crate::bench`].

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorsim::{Camera, ImageU8};
use crate::error::{Error, Result};
use crate::models::images_to_tensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// 1-based position in the source file(s).
    pub id: u32,
    pub label: u8,
    pub image: ImageU8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Assigns IDs 1..=n in the given order.
    pub fn from_records(records: impl IntoIterator<Item = (u8, ImageU8)>) -> Self {
        let samples = records
            .into_iter()
            .enumerate()
            .map(|(i, (label, image))| Sample {
                id: i as u32 + 1,
                label,
                image,
            })
            .collect();
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.label as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn map_images(&self, camera: &Camera) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    id: s.id,
                    label: s.label,
                    image: camera.apply(&s.image),
                })
                .collect(),
        }
    }

    /// Cuts the pool into train/val/test by ID range.
    pub fn split(&self, spec: &SplitSpec) -> Result<BenchSplits> {
        let pick = |range: &RangeInclusive<usize>| -> Vec<Sample> {
            self.samples
                .iter()
                .filter(|s| range.contains(&(s.id as usize)))
                .cloned()
                .collect()
        };
        let (train, val, test) = (pick(&spec.train), pick(&spec.val), pick(&spec.test));
        let expected =
            spec.train.clone().count() + spec.val.clone().count() + spec.test.clone().count();
        if train.len() + val.len() + test.len() != expected {
            return Err(Error::Shape {
                op: "split",
                dim: "pool_size",
                expected,
                got: train.len() + val.len() + test.len(),
            });
        }
        Ok(BenchSplits {
            train: Split {
                kind: SplitKind::Train,
                samples: train,
            },
            val: Split {
                kind: SplitKind::Val,
                samples: val,
            },
            test: TestSplit { samples: test },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
}

/// Training or validation data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    kind: SplitKind,
    samples: Vec<Sample>,
}

impl Split {
    pub fn new(kind: SplitKind, samples: Vec<Sample>) -> Self {
        Self { kind, samples }
    }

    pub fn kind(&self) -> SplitKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn map_images(&self, camera: &Camera) -> Self {
        Self {
            kind: self.kind,
            samples: transform(&self.samples, camera),
        }
    }

    /// Mini-batches of (NHWC images in [0, 1], labels). With a seed the
    /// order is a ChaCha shuffle keyed on it; otherwise file order.
    pub fn batches<T: Scalar>(
        &self,
        batch_size: usize,
        shuffle: Option<u64>,
    ) -> Result<impl Iterator<Item = Result<(Tensor<T>, Vec<usize>)>> + '_> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        if let Some(seed) = shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        Ok(chunks
            .into_iter()
            .map(move |idx| batch_of(idx.iter().map(|&i| &self.samples[i]))))
    }
}

/// Held-out evaluation data; deliberately has no public sample accessor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSplit {
    samples: Vec<Sample>,
}

impl TestSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn map_images(&self, camera: &Camera) -> Self {
        Self {
            samples: transform(&self.samples, camera),
        }
    }

    /// The first `n` samples, in ID order.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n > self.samples.len() {
            return Err(Error::InvalidArgument(format!(
                "subset of {n} requested from a test split of {}",
                self.samples.len()
            )));
        }
        Ok(Self {
            samples: self.samples[..n].to_vec(),
        })
    }

    pub(crate) fn samples(&self) -> &[Sample] {
        &self.samples
    }
}

pub struct BenchSplits {
    pub train: Split,
    pub val: Split,
    pub test: TestSplit,
}

impl BenchSplits {
    pub fn map_images(&self, camera: &Camera) -> Self {
        Self {
            train: self.train.map_images(camera),
            val: self.val.map_images(camera),
            test: self.test.map_images(camera),
        }
    }
}

fn transform(samples: &[Sample], camera: &Camera) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| Sample {
            id: s.id,
            label: s.label,
            image: camera.apply(&s.image),
        })
        .collect()
}

pub(crate) fn batch_of<'a, T: Scalar>(
    samples: impl Iterator<Item = &'a Sample>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (images, labels): (Vec<ImageU8>, Vec<usize>) =
        samples.map(|s| (s.image.clone(), s.label as usize)).unzip();
    Ok((images_to_tensor(&images)?, labels))
}

/// Contiguous 1-based ID ranges for train, validation and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: RangeInclusive<usize>,
    pub val: RangeInclusive<usize>,
    pub test: RangeInclusive<usize>,
}

/// 40,000 / 5,000 / 5,000 out of 50,000.
pub const DEFAULT_PROPORTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Deterministic train → val → test ID ranges over a pool of `pool_size`.
/// Train and val sizes are `floor(pool·p)`; test takes the remainder.
pub fn make_splits(pool_size: usize, proportions: [f64; 3]) -> Result<SplitSpec> {
    if pool_size < 10 {
        return Err(Error::InvalidArgument(format!(
            "pool of {pool_size} is too small to split"
        )));
    }
    if proportions.iter().any(|&p| p.is_nan() || p <= 0.0)
        || (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split proportions {proportions:?} must be positive and sum to 1"
        )));
    }
    let size = |p: f64| (pool_size as f64 * p + 1e-9).floor() as usize;
    let (n_train, n_val) = (size(proportions[0]), size(proportions[1]));
    let n_test = pool_size.saturating_sub(n_train + n_val);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(format!(
            "pool of {pool_size} leaves an empty split ({n_train}/{n_val}/{n_test})"
        )));
    }
    Ok(SplitSpec {
        train: 1..=n_train,
        val: n_train + 1..=n_train + n_val,
        test: n_train + n_val + 1..=pool_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_sized_pool() {
        let s = make_splits(50_000, DEFAULT_PROPORTIONS).unwrap();
        assert_eq!(
            (s.train, s.val, s.test),
            (1..=40_000, 40_001..=45_000, 45_001..=50_000)
        );
    }

    #[test]
    fn cifar_sized_pool() {
        let s = make_splits(10_000, DEFAULT_PROPORTIONS).unwrap();
        assert_eq!(
            (s.train, s.val, s.test),
            (1..=8000, 8001..=9000, 9001..=10_000)
        );
    }

    #[test]
    fn smallest_pools() {
        let s = make_splits(10, DEFAULT_PROPORTIONS).unwrap();
        assert_eq!((s.train, s.val, s.test), (1..=8, 9..=9, 10..=10));
        assert!(make_splits(9, DEFAULT_PROPORTIONS).is_err());
        assert!(make_splits(100, [0.5, 0.5, 0.0]).is_err());
        assert!(make_splits(100, [0.5, 0.2, 0.2]).is_err());
    }

    #[test]
    fn test_split_head_bounds() {
        let pool = LabeledDataset::from_records(
            (0..20).map(|i| (i as u8 % 3, ImageU8::filled(2, 2, [i as u8; 3]))),
        );
        let splits = pool
            .split(&make_splits(20, DEFAULT_PROPORTIONS).unwrap())
            .unwrap();
        assert_eq!(
            (splits.train.len(), splits.val.len(), splits.test.len()),
            (16, 2, 2)
        );
        assert!(splits.test.head(3).is_err());
        assert_eq!(splits.test.head(1).unwrap().samples()[0].id, 19);
    }

    #[test]
    fn shuffled_batches_are_deterministic() {
        let samples = (0..10)
            .map(|i| Sample {
                id: i + 1,
                label: i as u8,
                image: ImageU8::filled(1, 1, [0; 3]),
            })
            .collect();
        let split = Split::new(SplitKind::Train, samples);
        let collect = |seed| {
            split
                .batches::<f32>(4, seed)
                .unwrap()
                .collect::<Result<Vec<_>>>()
                .unwrap()
        };
        let (a, b) = (collect(Some(7)), collect(Some(7)));
        let labels = |v: &[(Tensor<f32>, Vec<usize>)]| {
            v.iter().flat_map(|(_, l)| l.clone()).collect::<Vec<_>>()
        };
        assert_eq!(labels(&a), labels(&b));
        assert_eq!(
            a.iter().map(|(_, l)| l.len()).collect::<Vec<_>>(),
            [4, 4, 2]
        );
        let mut sorted = labels(&a);
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_ne!(labels(&a), labels(&collect(None)));
    }
}
