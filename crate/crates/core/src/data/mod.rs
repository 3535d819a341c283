//! Datasets, IDX ingestion, seeded subsetting/splitting and batch assembly.
//!
//! Pixels are kept raw in `[0, 1]`; per-channel normalization is applied when a
//! batch is turned into a model input, after augmentation. Datasets share their
//! pixel storage, so subsets and splits are cheap index views.

mod augment;
mod idx;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub use augment::{
    rotate_image, AugStep, AugmentationPolicy, AugmentedBatch, Augmenter, ImageSource, MixInfo,
};
pub use idx::{read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug)]
struct Storage {
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

/// An immutable view over shared image storage.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    split: String,
    shape: [usize; 3],
    classes: usize,
    norm: Normalization,
    storage: Arc<Storage>,
    rows: Arc<Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset from raw pixels in `[0, 1]`; normalization statistics
    /// are computed from these pixels.
    pub fn from_parts(
        name: &str,
        split: &str,
        shape: [usize; 3],
        pixels: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if labels.is_empty() || per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::InvalidArgument(format!(
                "dataset `{name}`: {} pixels for {} images of {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "dataset `{name}`: label {bad} >= {classes} classes"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault {
                op: "dataset pixels",
            });
        }
        let norm = channel_stats(&pixels, shape);
        let n = labels.len();
        Ok(Dataset {
            name: name.to_string(),
            split: split.to_string(),
            shape,
            classes,
            norm,
            storage: Arc::new(Storage { pixels, labels }),
            rows: Arc::new((0..n).collect()),
        })
    }

    /// Reads an IDX image file and its label file. The class count is the largest label plus one.
    pub fn load_idx(images: &Path, labels: &Path, name: &str, split: &str) -> Result<Self> {
        let (shape, pixels) = read_idx_images(images)?;
        let ys = read_idx_labels(labels)?;
        if ys.len() * shape.iter().product::<usize>() != pixels.len() {
            return Err(Error::Parse {
                path: labels.to_path_buf(),
                offset: 4,
                reason: format!(
                    "{} labels for {} images",
                    ys.len(),
                    pixels.len() / shape.iter().product::<usize>()
                ),
            });
        }
        let classes = ys.iter().max().map_or(1, |m| m + 1);
        Self::from_parts(name, split, shape, pixels, ys, classes)
    }

    /// MNIST train and test splits from a directory holding the four standard
    /// IDX files. The test split carries the train split's normalization.
    pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
        let mut train = Self::load_idx(
            &dir.join(MNIST_TRAIN_IMAGES),
            &dir.join(MNIST_TRAIN_LABELS),
            "mnist",
            "train",
        )?;
        let mut test = Self::load_idx(
            &dir.join(MNIST_TEST_IMAGES),
            &dir.join(MNIST_TEST_LABELS),
            "mnist",
            "test",
        )?;
        train.classes = train.classes.max(10);
        test.classes = train.classes;
        test.norm = train.norm.clone();
        Ok((train, test))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split_tag(&self) -> &str {
        &self.split
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    /// Replaces the normalization statistics, e.g. with those of a train split.
    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        if norm.mean.len() != self.shape[0]
            || norm.std.len() != self.shape[0]
            || norm.std.iter().any(|&s| !(s > 0.0))
        {
            return Err(Error::InvalidArgument(
                "normalization does not fit the dataset channels".into(),
            ));
        }
        self.norm = norm;
        Ok(self)
    }

    /// Force a class count, e.g. so a small subset keeps the full label space.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if self.labels().iter().any(|&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "labels exceed {classes} classes"
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    /// Indices into the underlying storage, in view order.
    pub fn source_indices(&self) -> &[usize] {
        &self.rows
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.image_len();
        let r = self.rows[i];
        &self.storage.pixels[r * p..(r + 1) * p]
    }

    pub fn label(&self, i: usize) -> usize {
        self.storage.labels[self.rows[i]]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|&r| self.storage.labels[r]).collect()
    }

    /// Raw pixels and labels of the given view positions.
    pub fn gather(&self, positions: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut pixels = Vec::with_capacity(positions.len() * self.image_len());
        let mut labels = Vec::with_capacity(positions.len());
        for &i in positions {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.label(i));
        }
        (pixels, labels)
    }

    /// A view of the given positions (no copy of pixels).
    pub fn select(&self, positions: &[usize]) -> Result<Dataset> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("empty selection".into()));
        }
        if let Some(&bad) = positions.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "position {bad} out of range {}",
                self.len()
            )));
        }
        Ok(Dataset {
            rows: Arc::new(positions.iter().map(|&i| self.rows[i]).collect()),
            ..self.clone()
        })
    }

    /// Concatenation of two views over the same storage.
    pub fn union(&self, other: &Dataset) -> Result<Dataset> {
        if !Arc::ptr_eq(&self.storage, &other.storage) {
            return Err(Error::InvalidArgument(
                "union of datasets with different storage".into(),
            ));
        }
        let mut rows = self.rows.to_vec();
        rows.extend_from_slice(&other.rows);
        Ok(Dataset {
            rows: Arc::new(rows),
            ..self.clone()
        })
    }

    /// Normalized model input `[n, C, H, W]` from raw pixels of `n` images.
    pub fn normalize(&self, raw: &[f32]) -> Result<Tensor> {
        let p = self.image_len();
        let plane = self.shape[1] * self.shape[2];
        let n = raw.len() / p;
        let data = raw
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let c = (k % p) / plane;
                (v - self.norm.mean[c]) / self.norm.std[c]
            })
            .collect();
        Tensor::new(vec![n, self.shape[0], self.shape[1], self.shape[2]], data)
    }

    /// Normalized inputs for view positions `start..end`.
    pub fn inputs(&self, start: usize, end: usize) -> Result<Tensor> {
        let positions: Vec<usize> = (start..end).collect();
        let (raw, _) = self.gather(&positions);
        self.normalize(&raw)
    }
}

fn channel_stats(pixels: &[f32], shape: [usize; 3]) -> Normalization {
    let [c, h, w] = shape;
    let plane = h * w;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for (k, &v) in pixels.iter().enumerate() {
        let ch = (k / plane) % c;
        sum[ch] += f64::from(v);
        sq[ch] += f64::from(v) * f64::from(v);
    }
    let count = (pixels.len() / c) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = (s / count - m * m).max(0.0);
            // A constant channel would otherwise divide by zero.
            if var > 1e-12 {
                var.sqrt() as f32
            } else {
                1.0
            }
        })
        .collect();
    Normalization {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        std,
    }
}

/// `n` examples drawn without replacement from the stream `("subset", seed)`.
pub fn subset(d: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > d.len() {
        return Err(Error::InvalidArgument(format!(
            "subset of {n} from {} examples",
            d.len()
        )));
    }
    let idx = Stream::tagged(seed, "subset", &[]).sample_indices(d.len(), n);
    d.select(&idx)
}

fn default_fraction() -> f64 {
    0.5
}

/// How to divide a dataset into a teacher part D0 and a held-out part D1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub seed: u64,
    /// Fraction of the shuffled examples assigned to D0; the rest go to D1.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    /// Explicit view positions, overriding the seeded shuffle when both are set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d0: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<Vec<usize>>,
}

impl SplitPlan {
    pub fn halves(seed: u64) -> Self {
        SplitPlan {
            seed,
            fraction: 0.5,
            d0: None,
            d1: None,
        }
    }
}

/// Disjoint D0 / D1 views.
pub fn split(d: &Dataset, plan: &SplitPlan) -> Result<(Dataset, Dataset)> {
    let (d0, d1) = match (&plan.d0, &plan.d1) {
        (Some(a), Some(b)) => {
            let mut seen = vec![false; d.len()];
            for &i in a.iter().chain(b) {
                if i >= d.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!(
                        "split index {i} repeated or out of range"
                    )));
                }
            }
            (a.clone(), b.clone())
        }
        (None, None) => {
            if !(plan.fraction > 0.0 && plan.fraction < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "split fraction {} outside (0, 1)",
                    plan.fraction
                )));
            }
            let perm = Stream::tagged(plan.seed, "split", &[]).permutation(d.len());
            let cut = (d.len() as f64 * plan.fraction).round() as usize;
            (perm[..cut].to_vec(), perm[cut..].to_vec())
        }
        _ => {
            return Err(Error::InvalidArgument(
                "split needs both d0 and d1 index lists".into(),
            ))
        }
    };
    Ok((d.select(&d0)?, d.select(&d1)?))
}

/// View positions of each batch in one epoch: a seeded shuffle cut into
/// `batch_size` chunks, the last one possibly shorter.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let perm = Stream::tagged(seed, "shuffle", &[epoch as u64]).permutation(n);
    perm.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
