//! Datasets, augmentation and the raw tensor container.

pub mod augment;
pub mod cifar;
pub mod container;
pub mod synth;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result, SfeError};

pub use augment::{augment, make_batch, plain_batch, AugmentParams, Normalization};
pub use cifar::{parse_cifar10_bin, write_cifar10_bin};
pub use container::{read_tensor_container, write_tensor_container, ContainerData};
pub use synth::synth_dataset;

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "SFE_DATA_DIR";

/// Images stored as `u8` in `[M, C, H, W]` order with labels in `[0, N)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImageDataset {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    /// `(C, H, W)` of one image.
    pub shape: [usize; 3],
    pub classes: usize,
    pub split: String,
}

impl LabeledImageDataset {
    pub fn new(images: Vec<u8>, labels: Vec<usize>, shape: [usize; 3], classes: usize, split: impl Into<String>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        ensure!(!labels.is_empty(), SfeError::data("dataset has no samples"));
        ensure!(
            per > 0 && images.len() == labels.len() * per,
            SfeError::data(format!(
                "{} pixel bytes for {} images of shape {shape:?}",
                images.len(),
                labels.len()
            ))
        );
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(SfeError::data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(LabeledImageDataset {
            images,
            labels,
            shape,
            classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        LabeledImageDataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            classes: self.classes,
            split: self.split.clone(),
        }
    }

    /// Per-channel mean and standard deviation of pixels scaled to `[0, 1]`.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.shape;
        let hw = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..self.len() {
            for (ch, plane) in self.image(i).chunks(hw).enumerate() {
                for &p in plane {
                    let v = p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (self.len() * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Normalization { mean, std }
    }
}

/// Visiting order of epoch `epoch`; a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Where a run's images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        /// `(C, H, W)`.
        size: [usize; 3],
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        /// Directory with `data_batch_*.bin` / `test_batch.bin`; falls back to `SFE_DATA_DIR`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { classes, .. } => *classes,
            DatasetSpec::Cifar10 { .. } => 10,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DatasetSpec::Synthetic { size, .. } => *size,
            DatasetSpec::Cifar10 { .. } => cifar::SHAPE,
        }
    }

    /// `(train, test)` splits.
    pub fn load(&self) -> Result<(LabeledImageDataset, LabeledImageDataset)> {
        match self {
            DatasetSpec::Synthetic {
                classes,
                per_class,
                test_per_class,
                size,
                seed,
            } => {
                let mut train = synth_dataset(*classes, *per_class, *size, *seed)?;
                let mut test = synth_dataset(*classes, *test_per_class, *size, seed.wrapping_add(0x5eed_7e57))?;
                train.split = "train".into();
                test.split = "test".into();
                Ok((train, test))
            }
            DatasetSpec::Cifar10 {
                root,
                train_limit,
                test_limit,
            } => {
                let root = resolve_root(root.as_ref())?;
                let train = cifar::load_split(&root, cifar::Split::Train)?;
                let test = cifar::load_split(&root, cifar::Split::Test)?;
                Ok((
                    train_limit.map_or(train.clone(), |n| train.take(n)),
                    test_limit.map_or(test.clone(), |n| test.take(n)),
                ))
            }
        }
    }
}

/// An explicit root, else `SFE_DATA_DIR`.
pub fn resolve_root(explicit: Option<&PathBuf>) -> Result<PathBuf> {
    let root = match explicit {
        Some(p) => p.clone(),
        None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
            SfeError::data(format!("no dataset root given and {DATA_DIR_ENV} is not set"))
        })?,
    };
    ensure!(
        root.is_dir(),
        SfeError::data(format!(
            "dataset root {} does not exist (set {DATA_DIR_ENV} or pass a root)",
            root.display()
        ))
    );
    Ok(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_a_permutation_fixed_by_seed_and_epoch() {
        let a = epoch_order(50, 3, 2);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 2));
        assert_ne!(a, epoch_order(50, 3, 3));
        assert_ne!(a, epoch_order(50, 4, 2));
    }

    #[test]
    fn dataset_rejects_inconsistent_input() {
        assert!(LabeledImageDataset::new(vec![0; 8], vec![0, 1], [1, 2, 2], 2, "x").is_ok());
        assert!(LabeledImageDataset::new(vec![0; 7], vec![0, 1], [1, 2, 2], 2, "x").is_err());
        assert!(LabeledImageDataset::new(vec![0; 8], vec![0, 2], [1, 2, 2], 2, "x").is_err());
        assert!(LabeledImageDataset::new(vec![], vec![], [1, 2, 2], 2, "x").is_err());
    }

    #[test]
    fn channel_stats_of_constant_planes() {
        let mut px = vec![0u8; 4];
        px.extend([255u8; 4]);
        let ds = LabeledImageDataset::new(px, vec![0], [2, 2, 2], 2, "x").unwrap();
        let s = ds.channel_stats();
        assert_eq!(s.mean, vec![0.0, 1.0]);
        assert!(s.std.iter().all(|&v| v == 1e-3));
    }

    #[test]
    fn missing_root_names_the_environment_variable() {
        let err = resolve_root(Some(&PathBuf::from("/definitely/not/here"))).unwrap_err();
        assert!(err.to_string().contains(DATA_DIR_ENV));
    }
}
