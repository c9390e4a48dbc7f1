//! Datasets, batching, and image files.

mod idx;
mod image;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use idx::{load_idx, parse_idx, parse_images, parse_labels, IMAGES_MAGIC, LABELS_MAGIC, MAX_CLASSES};
pub use image::{
    center_crop_resize, encode_grid, grid_canvas, load_ppm_dir, read_pnm, write_image_grid, GUTTER,
};

use crate::rng::SplitRng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{what}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { what: String, expected: u32, found: u32 },
    #[error("{what}: truncated file, expected {expected} bytes but found {actual}")]
    Truncated { what: String, expected: u64, actual: u64 },
    #[error("{what}: expected {expected} bytes but found {actual} (trailing data)")]
    TrailingBytes { what: String, expected: u64, actual: u64 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("image {h}x{w} is smaller than the {crop}x{crop} crop")]
    TooSmall { h: usize, w: usize, crop: usize },
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Format(String),
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("{path}: {source}")]
    At { path: PathBuf, source: Box<DataError> },
}

impl DataError {
    /// Attaches the file the error came from.
    pub fn at(self, path: &Path) -> Self {
        match self {
            e @ (DataError::Io { .. } | DataError::At { .. }) => e,
            e => DataError::At { path: path.to_path_buf(), source: Box::new(e) },
        }
    }

    /// The error without file context.
    pub fn root(&self) -> &DataError {
        match self {
            DataError::At { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images `(count, channels, h, w)` in [0, 1], optionally labelled.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>, split: Split) -> Result<Self, DataError> {
        if images.ndim() != 4 {
            return Err(DataError::Shape(format!("images must be (count, c, h, w), got {:?}", images.shape())));
        }
        if let Some(y) = &labels {
            if y.len() != images.shape()[0] {
                return Err(DataError::CountMismatch { images: images.shape()[0], labels: y.len() });
            }
        }
        if images.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Format("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(channels, h, w)`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        let [c, h, w] = self.sample_shape();
        let n = c * h * w;
        Tensor::new(vec![c, h, w], self.images.data()[i * n..(i + 1) * n].to_vec())
    }

    /// The first `n` samples (all of them if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let (x, y) = self.gather(&(0..n).collect::<Vec<_>>());
        Dataset { images: x, labels: y, split: self.split }
    }

    /// Stacks the given samples into one batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Option<Vec<usize>>) {
        let [c, h, w] = self.sample_shape();
        let n = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        let labels = self.labels.as_ref().map(|y| indices.iter().map(|&i| y[i]).collect());
        (Tensor::new(vec![indices.len(), c, h, w], data), labels)
    }
}

/// Paths of the MNIST-layout files under `root`.
pub fn mnist_paths(root: &Path, split: Split) -> (PathBuf, PathBuf) {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = root.join("mnist");
    (dir.join(format!("{stem}-images-idx3-ubyte")), dir.join(format!("{stem}-labels-idx1-ubyte")))
}

/// Loads `root/mnist/{train,t10k}-{images,labels}-idx*-ubyte`.
pub fn load_mnist(root: &Path, split: Split) -> Result<Dataset, DataError> {
    let (images, labels) = mnist_paths(root, split);
    load_idx(&images, Some(&labels), split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        BatchPlan { batch_size, seed, shuffle: true, drop_last: false }
    }

    /// Sample order for one epoch, split into batches.
    pub fn epoch(&self, count: usize, epoch: u64) -> Result<Vec<Vec<usize>>, DataError> {
        if self.batch_size == 0 {
            return Err(DataError::EmptyBatch);
        }
        let mut order: Vec<usize> = (0..count).collect();
        if self.shuffle {
            order.shuffle(&mut SplitRng::new(self.seed).epoch_shuffle(epoch));
        }
        Ok(order
            .chunks(self.batch_size)
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect())
    }
}

/// Batches of one epoch.
pub fn batches<'a>(
    ds: &'a Dataset,
    plan: &BatchPlan,
    epoch: u64,
) -> Result<impl Iterator<Item = (Tensor<f32>, Option<Vec<usize>>)> + 'a, DataError> {
    let order = plan.epoch(ds.len(), epoch)?;
    Ok(order.into_iter().map(move |idx| ds.gather(&idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drop_last_discards_the_short_tail() {
        let plan = BatchPlan { drop_last: true, ..BatchPlan::new(3, 1) };
        assert_eq!(plan.epoch(10, 0).unwrap().len(), 3);
        let plan = BatchPlan::new(3, 1);
        assert_eq!(plan.epoch(10, 0).unwrap().len(), 4);
        assert!(matches!(BatchPlan::new(0, 1).epoch(10, 0), Err(DataError::EmptyBatch)));
    }

    #[test]
    fn epochs_are_reproducible_and_distinct() {
        let plan = BatchPlan::new(4, 9);
        assert_eq!(plan.epoch(20, 2).unwrap(), plan.epoch(20, 2).unwrap());
        assert_ne!(plan.epoch(20, 2).unwrap(), plan.epoch(20, 3).unwrap());
    }
}
