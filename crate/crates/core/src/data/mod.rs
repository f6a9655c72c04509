//! Datasets: synthetic generators, CIFAR-10 binary ingestion and
//! common-corruption regeneration.

mod cifar;
mod corruption;
mod synthetic;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cifar::{encode_cifar_record, load_cifar10, load_cifar10_files, parse_cifar10, CifarSplit, CIFAR_RECORD_BYTES};
pub use corruption::{corrupt, corrupt_with_intensity, CorruptionKind, CorruptionSpec, IMPLEMENTED_CORRUPTIONS};
pub use synthetic::{make_blobs, make_three_class, three_class_centers};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Channel-major image layout of each feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const CIFAR: ImageShape = ImageShape {
        channels: 3,
        height: 32,
        width: 32,
    };

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Valid,
    Test,
    Corrupted(String),
}

/// Features in `[0, 1]` (one row per sample) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    split: SplitTag,
    image: Option<ImageShape>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} feature values for {} rows of dim {dim}", features.len(), labels.len()),
            ));
        }
        if num_classes < 2 {
            return Err(Error::domain("a dataset needs at least 2 classes"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::domain(format!("label {l} outside [0, {num_classes})")));
        }
        if let Some(v) = features.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::domain(format!("feature value {v} outside [0, 1]")));
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            num_classes,
            split: SplitTag::Full,
            image: None,
        })
    }

    pub fn with_image_shape(mut self, image: ImageShape) -> Result<Self> {
        if image.len() != self.dim {
            return Err(Error::shape(
                "dataset",
                format!("image shape {image:?} does not match dim {}", self.dim),
            ));
        }
        self.image = Some(image);
        Ok(self)
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn split_tag(&self) -> &SplitTag {
        &self.split
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Every class in `[0, K)` has at least one sample.
    pub fn covers_all_classes(&self) -> bool {
        self.class_counts().iter().all(|&c| c > 0)
    }

    /// Rows at `indices`, stacked into a `[n, dim]` tensor, plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::domain(format!("row {i} outside dataset of {}", self.len())));
            }
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        Ok((Tensor::matrix(indices.len(), self.dim, x)?, y))
    }

    /// Consecutive index chunks covering the dataset in order.
    pub fn index_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(indices)?;
        Ok(Dataset {
            features: x.into_values(),
            dim: self.dim,
            labels: y,
            num_classes: self.num_classes,
            split: self.split.clone(),
            image: self.image,
        })
    }

    pub(crate) fn with_features(&self, features: Vec<f64>, split: SplitTag) -> Dataset {
        debug_assert_eq!(features.len(), self.features.len());
        Dataset {
            features,
            dim: self.dim,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split,
            image: self.image,
        }
    }

    /// CSV with header `label,f0,f1,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for j in 0..self.dim {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.labels[i]);
            for v in self.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Stratified split: each class sends `ceil(fraction * n_k)` samples to the
/// second part. Returns `(kept, held_out)`; both keep dataset order.
pub fn stratified_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::domain(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < 2 {
            return Err(Error::domain(format!(
                "class {class} has {} samples; a split needs at least 2",
                members.len()
            )));
        }
        let take = ((fraction * members.len() as f64).ceil() as usize).min(members.len() - 1);
        members.shuffle(&mut rng);
        held.extend_from_slice(&members[..take]);
    }
    held.sort_unstable();
    let mut is_held = vec![false; dataset.len()];
    held.iter().for_each(|&i| is_held[i] = true);
    let kept: Vec<usize> = (0..dataset.len()).filter(|&i| !is_held[i]).collect();
    Ok((dataset.subset(&kept)?, dataset.subset(&held)?))
}

/// Training/validation split used before training starts.
pub fn split(dataset: &Dataset, valid_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, valid) = stratified_split(dataset, valid_fraction, seed)?;
    Ok((train.with_split(SplitTag::Train), valid.with_split(SplitTag::Valid)))
}

/// Scales each feature column to `[0, 1]`; constant columns map to 0.5.
pub(crate) fn min_max_scale(features: &mut [f64], dim: usize) {
    for j in 0..dim {
        let column = features.iter().skip(j).step_by(dim);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in features.iter_mut().skip(j).step_by(dim) {
            *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.5 };
        }
    }
}
