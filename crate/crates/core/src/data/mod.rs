//! Benchmark datasets, client partitioning, and forget/retain splits.

mod cifar;
mod mnist;
pub mod partition;
pub mod synth;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub use partition::{partition_iid, split_forget_retain, ClientPartition, DeletionRequest, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Cifar100,
    /// Procedurally generated analogue used where the benchmark archives are
    /// not available on disk (see [`synth`]).
    Synthetic,
}

impl DatasetName {
    pub fn parse(s: &str) -> Result<DatasetName> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            "cifar100" => Ok(DatasetName::Cifar100),
            "synthetic" => Ok(DatasetName::Synthetic),
            other => Err(Error::argument(format!("unknown dataset `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Cifar100 => "cifar100",
            DatasetName::Synthetic => "synthetic",
        }
    }
}

/// Shape and size card of one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: DatasetName,
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
}

/// Labeled image tensor batch, normalized per channel with training-set
/// statistics. Read-only after load; safe to share across workers.
#[derive(Clone, Debug)]
pub struct Dataset<F: Scalar> {
    pub images: Array4<F>,
    pub labels: Vec<usize>,
}

impl<F: Scalar> Dataset<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    /// New dataset holding the given rows (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Dataset<F> {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        Dataset { images, labels }
    }

    /// Rows whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize], keep: bool) -> Dataset<F> {
        let indices: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l) == keep)
            .map(|(i, _)| i)
            .collect();
        self.subset(&indices)
    }

    /// Batch view as an owned tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Array4<F>, Vec<usize>) {
        let sub = self.subset(indices);
        (sub.images, sub.labels)
    }
}

/// Raw u8 images plus labels, before normalization.
pub(crate) struct RawSet {
    pub pixels: Vec<u8>, // row-major [n, c, h, w]
    pub labels: Vec<usize>,
    pub shape: (usize, usize, usize),
}

/// Per-channel zero-mean/unit-variance normalization; statistics always come
/// from the training set.
pub(crate) fn normalize<F: Scalar>(train: RawSet, test: RawSet) -> (Dataset<F>, Dataset<F>) {
    let (c, h, w) = train.shape;
    let per = h * w;
    let n_train = train.labels.len();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for ni in 0..n_train {
            let base = (ni * c + ci) * per;
            for &p in &train.pixels[base..base + per] {
                let v = p as f64 / 255.0;
                sum += v;
                sum_sq += v * v;
            }
        }
        let n = (n_train * per) as f64;
        mean[ci] = sum / n;
        var[ci] = (sum_sq / n - mean[ci] * mean[ci]).max(1e-12);
    }
    let build = |set: RawSet| {
        let n = set.labels.len();
        let mut images = Array4::<F>::zeros((n, c, h, w));
        let out = images.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * per;
                let m = mean[ci];
                let s = var[ci].sqrt();
                for k in 0..per {
                    let v = set.pixels[base + k] as f64 / 255.0;
                    out[base + k] = F::cast((v - m) / s);
                }
            }
        }
        Dataset {
            images,
            labels: set.labels,
        }
    };
    (build(train), build(test))
}

/// Load a benchmark dataset from `root`, returning train set, test set, and
/// manifest. Pixels are normalized per channel with training-set statistics;
/// sample order is the archive order (deterministic).
pub fn load_dataset<F: Scalar>(
    name: DatasetName,
    root: &Path,
) -> Result<(Dataset<F>, Dataset<F>, DatasetManifest)> {
    let (train, test, manifest) = match name {
        DatasetName::Mnist => mnist::load(root)?,
        DatasetName::Cifar10 => cifar::load10(root)?,
        DatasetName::Cifar100 => cifar::load100(root)?,
        DatasetName::Synthetic => {
            return Err(Error::argument(
                "synthetic data is generated, not loaded; use data::synth::generate".to_string(),
            ))
        }
    };
    let (train, test) = normalize(train, test);
    Ok((train, test, manifest))
}
