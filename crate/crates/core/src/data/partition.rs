//! Client partitioning and forget/retain splits.

use super::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// One client's slice of the training set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub sample_indices: Vec<usize>,
}

/// A client's request to forget a set of classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionRequest {
    pub client_id: usize,
    pub forget_classes: BTreeSet<usize>,
}

impl DeletionRequest {
    pub fn new(client_id: usize, classes: impl IntoIterator<Item = usize>) -> Self {
        DeletionRequest {
            client_id,
            forget_classes: classes.into_iter().collect(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.forget_classes.is_empty() {
            return Err(Error::argument(format!(
                "deletion request from client {} names no classes",
                self.client_id
            )));
        }
        if let Some(&bad) = self.forget_classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::argument(format!(
                "deletion request names class {bad}, but the dataset has {num_classes} classes"
            )));
        }
        Ok(())
    }
}

/// Forget/retain index split of one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub forget: Vec<usize>,
    pub retain: Vec<usize>,
}

/// Shuffle indices and deal them into `n_clients` near-equal disjoint parts.
/// Deterministic per seed.
pub fn partition_iid<F: Scalar>(
    train: &Dataset<F>,
    n_clients: usize,
    seed: u64,
) -> Result<Vec<ClientPartition>> {
    if n_clients == 0 {
        return Err(Error::argument("n_clients must be positive"));
    }
    let n = train.len();
    if n_clients > n {
        return Err(Error::argument(format!(
            "cannot split {n} samples across {n_clients} clients"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let base = n / n_clients;
    let extra = n % n_clients;
    let mut partitions = Vec::with_capacity(n_clients);
    let mut pos = 0;
    for client_id in 0..n_clients {
        let take = base + usize::from(client_id < extra);
        partitions.push(ClientPartition {
            client_id,
            sample_indices: indices[pos..pos + take].to_vec(),
        });
        pos += take;
    }
    Ok(partitions)
}

/// Split a dataset into forget and retain index sets by class membership.
/// Class unlearning is label-scoped: every sample of a requested class lands
/// in the forget set, regardless of which client holds it.
pub fn split_forget_retain<F: Scalar>(
    dataset: &Dataset<F>,
    requests: &[DeletionRequest],
) -> Result<Split> {
    if requests.is_empty() {
        return Err(Error::argument("no deletion requests given"));
    }
    let num_classes = dataset.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut forget_classes = BTreeSet::new();
    for req in requests {
        req.validate(num_classes.max(1))?;
        forget_classes.extend(req.forget_classes.iter().copied());
    }
    let mut split = Split {
        forget: Vec::new(),
        retain: Vec::new(),
    };
    for (i, label) in dataset.labels.iter().enumerate() {
        if forget_classes.contains(label) {
            split.forget.push(i);
        } else {
            split.retain.push(i);
        }
    }
    Ok(split)
}

/// Persist a `{client_id: [indices]}` manifest next to the run artifacts.
pub fn save_partition_manifest(partitions: &[ClientPartition], path: &Path) -> Result<()> {
    let map: BTreeMap<String, &Vec<usize>> = partitions
        .iter()
        .map(|p| (p.client_id.to_string(), &p.sample_indices))
        .collect();
    let json = serde_json::to_string_pretty(&map)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_partition_manifest(path: &Path) -> Result<Vec<ClientPartition>> {
    let json = std::fs::read_to_string(path)?;
    let map: BTreeMap<String, Vec<usize>> = serde_json::from_str(&json)?;
    let mut partitions: Vec<ClientPartition> = map
        .into_iter()
        .map(|(k, v)| {
            k.parse::<usize>()
                .map(|client_id| ClientPartition {
                    client_id,
                    sample_indices: v,
                })
                .map_err(|e| Error::argument(format!("bad client id `{k}`: {e}")))
        })
        .collect::<Result<_>>()?;
    partitions.sort_by_key(|p| p.client_id);
    Ok(partitions)
}
