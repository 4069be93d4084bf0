//! Federated training: per-client local optimization, FedAvg aggregation,
//! and the round loop that produces the converged global model.

mod optimizer;

pub use optimizer::{Optimizer, OptimizerKind};

use crate::data::{ClientPartition, Dataset};
use crate::error::{Error, Result};
use crate::nn::ckpt::{self, CkptHeader};
use crate::nn::layers::BnMode;
use crate::nn::ops::{argmax_rows, cross_entropy_mean};
use crate::nn::{build_model_with_input, Arch, Model, ModelParams};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FedConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Off by default: plain unweighted mean of client updates. When set,
    /// updates are weighted by partition size.
    #[serde(default)]
    pub weighted: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        // batch 100 / lr 0.01 / SGD; the CIFAR runs override to batch 128 + Adam
        FedConfig {
            n_clients: 10,
            rounds: 5,
            local_epochs: 1,
            batch_size: 100,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            weighted: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.batch_size == 0 {
            return Err(Error::argument("n_clients and batch_size must be positive"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::argument("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Persistent record of a federated training run.
#[derive(Clone, Debug)]
pub struct FedRun<F: Scalar> {
    pub config: FedConfig,
    pub round_checkpoints: Vec<PathBuf>,
    pub final_global: ModelParams<F>,
}

/// Deterministic per-(round, client) seed stream.
fn derive_seed(seed: u64, round: usize, client: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((round as u64 + 1).wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add((client as u64 + 1).wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z ^ (z >> 31)
}

/// Run `local_epochs` of minibatch cross-entropy training on one client's
/// partition, starting from the global parameters. The global model itself is
/// not modified. Returns `None` for an empty partition (skip, not failure).
pub fn local_train<F: Scalar>(
    global: &Model<F>,
    data: &Dataset<F>,
    partition: &ClientPartition,
    cfg: &FedConfig,
    seed: u64,
) -> Result<Option<ModelParams<F>>> {
    if partition.sample_indices.is_empty() {
        return Ok(None);
    }
    let mut model = global.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = partition.sample_indices.clone();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let tape = model.forward_tape(&x, BnMode::Train)?;
            let (_, dlogits) = cross_entropy_mean(&tape.logits, &y);
            let grad = model.param_grad(&tape, &dlogits);
            let mut params = model.params();
            opt.step(&mut params.flat, &grad);
            model.set_params(&params)?;
        }
    }
    Ok(Some(model.params()))
}

/// Elementwise arithmetic mean of client updates (unweighted by default).
/// Accumulation runs in f64 regardless of the run scalar.
pub fn fedavg<F: Scalar>(updates: &[ModelParams<F>]) -> Result<ModelParams<F>> {
    fedavg_weighted_impl(updates, None)
}

/// Mean weighted by partition sizes; used only when `FedConfig::weighted`.
pub fn fedavg_weighted<F: Scalar>(
    updates: &[ModelParams<F>],
    weights: &[f64],
) -> Result<ModelParams<F>> {
    if weights.len() != updates.len() {
        return Err(Error::argument("one weight per update required"));
    }
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::argument("aggregation weights must be positive"));
    }
    fedavg_weighted_impl(updates, Some(weights))
}

fn fedavg_weighted_impl<F: Scalar>(
    updates: &[ModelParams<F>],
    weights: Option<&[f64]>,
) -> Result<ModelParams<F>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::argument("fedavg needs at least one update"))?;
    for u in updates {
        if u.arch != first.arch || u.num_classes != first.num_classes || u.len() != first.len() {
            return Err(Error::ArchMismatch(
                "fedavg got updates from different architectures".to_string(),
            ));
        }
    }
    let total_weight: f64 = match weights {
        Some(ws) => ws.iter().sum(),
        None => updates.len() as f64,
    };
    let mut acc = vec![0.0f64; first.len()];
    for (i, u) in updates.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[i]);
        for (a, &v) in acc.iter_mut().zip(u.flat.iter()) {
            *a += w * v.to_f64_lossy();
        }
    }
    let flat = acc.into_iter().map(|v| F::cast(v / total_weight)).collect();
    Ok(ModelParams {
        arch: first.arch,
        num_classes: first.num_classes,
        flat,
    })
}

/// Top-1 accuracy (percent) over a dataset, evaluated in chunks.
pub fn accuracy<F: Scalar>(model: &Model<F>, data: &Dataset<F>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::argument("accuracy of an empty dataset is undefined"));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(512) {
        let (x, y) = data.batch(chunk);
        let logits = model.predict(&x)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(y.iter())
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Execute `rounds` of broadcast -> local train -> aggregate. Clients run in
/// parallel; aggregation always folds in client-id order, so results do not
/// depend on scheduling.
pub fn run_federation<F: Scalar>(
    cfg: &FedConfig,
    partitions: &[ClientPartition],
    arch: Arch,
    num_classes: usize,
    input_shape: (usize, usize, usize),
    train: &Dataset<F>,
    test: Option<&Dataset<F>>,
    out_dir: Option<&Path>,
) -> Result<FedRun<F>> {
    cfg.validate()?;
    if partitions.is_empty() {
        return Err(Error::argument("run_federation needs at least one partition"));
    }
    let mut global: Model<F> = build_model_with_input(arch, num_classes, input_shape, cfg.seed)?;
    let mut round_checkpoints = Vec::new();
    let mut metrics: Option<std::fs::File> = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let cfg_json = serde_json::to_string_pretty(cfg)?;
        std::fs::write(dir.join("config.json"), cfg_json)?;
        let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
        writeln!(f, "round,test_accuracy")?;
        metrics = Some(f);
    }

    for round in 0..cfg.rounds {
        let snapshot = global.clone();
        let mut locals: Vec<(usize, Option<ModelParams<F>>)> = partitions
            .par_iter()
            .map(|p| {
                let seed = derive_seed(cfg.seed, round, p.client_id);
                local_train(&snapshot, train, p, cfg, seed).map(|r| (p.client_id, r))
            })
            .collect::<Result<_>>()?;
        locals.sort_by_key(|(id, _)| *id);
        let mut updates = Vec::new();
        let mut weights = Vec::new();
        for ((_, update), part) in locals.into_iter().zip(partitions.iter()) {
            if let Some(u) = update {
                updates.push(u);
                weights.push(part.sample_indices.len() as f64);
            }
        }
        if updates.is_empty() {
            return Err(Error::argument(format!(
                "round {round}: every client partition was empty"
            )));
        }
        let aggregated = if cfg.weighted {
            fedavg_weighted(&updates, &weights)?
        } else {
            fedavg(&updates)?
        };
        global.set_params(&aggregated)?;

        if let Some(dir) = out_dir {
            let path = dir.join(format!("round_{round:04}.ckpt"));
            let header = CkptHeader {
                arch,
                num_classes,
                input_shape,
                dtype: F::DTYPE.to_string(),
                seed: cfg.seed,
                round,
            };
            ckpt::save(&global, &header, &path)
                .map_err(|e| Error::Checkpoint {
                    path: path.clone(),
                    reason: format!("round {round}: {e}"),
                })?;
            round_checkpoints.push(path);
        }
        if let (Some(f), Some(ts)) = (metrics.as_mut(), test) {
            let acc = accuracy(&global, ts)?;
            writeln!(f, "{round},{acc:.4}")?;
        }
    }

    Ok(FedRun {
        config: cfg.clone(),
        round_checkpoints,
        final_global: global.params(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthSpec};
    use crate::nn::build_model;
    use ndarray::Array1;

    fn tiny_data() -> Dataset<f64> {
        let spec = SynthSpec {
            num_classes: 2,
            shape: (1, 16, 16),
            train_size: 16,
            test_size: 8,
            noise_sigma: 0.1,
            seed: 3,
        };
        generate::<f64>(&spec).unwrap().0
    }

    fn params(vals: &[f64]) -> ModelParams<f64> {
        ModelParams {
            arch: Arch::Custom,
            num_classes: 2,
            flat: Array1::from_vec(vals.to_vec()),
        }
    }

    #[test]
    fn fedavg_mean_of_two() {
        let avg = fedavg(&[params(&[1.0, 3.0]), params(&[3.0, 5.0])]).unwrap();
        assert_eq!(avg.flat.to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn fedavg_single_is_identity() {
        let avg = fedavg(&[params(&[0.25, -7.5, 2.0])]).unwrap();
        assert_eq!(avg.flat.to_vec(), vec![0.25, -7.5, 2.0]);
    }

    #[test]
    fn fedavg_rejects_mixed_architectures() {
        let a = params(&[1.0]);
        let mut b = params(&[1.0]);
        b.arch = Arch::Lenet5;
        assert!(fedavg(&[a.clone(), b]).is_err());
        let c = params(&[1.0, 2.0]);
        assert!(fedavg(&[a, c]).is_err());
        assert!(fedavg::<f64>(&[]).is_err());
    }

    #[test]
    fn weighted_fedavg() {
        let avg =
            fedavg_weighted(&[params(&[0.0, 0.0]), params(&[4.0, 8.0])], &[3.0, 1.0]).unwrap();
        assert_eq!(avg.flat.to_vec(), vec![1.0, 2.0]);
        assert!(fedavg_weighted(&[params(&[0.0])], &[0.0]).is_err());
    }

    #[test]
    fn zero_local_epochs_is_identity() {
        let data = tiny_data();
        let model =
            crate::nn::build_model_with_input::<f64>(Arch::Lenet5, 2, (1, 16, 16), 3).unwrap();
        let cfg = FedConfig {
            local_epochs: 0,
            ..FedConfig::default()
        };
        let part = ClientPartition {
            client_id: 0,
            sample_indices: (0..data.len()).collect(),
        };
        let out = local_train(&model, &data, &part, &cfg, 1).unwrap().unwrap();
        assert_eq!(out, model.params());
    }

    #[test]
    fn local_train_is_deterministic_and_leaves_global_untouched() {
        let data = tiny_data();
        let model =
            crate::nn::build_model_with_input::<f64>(Arch::Lenet5, 2, (1, 16, 16), 3).unwrap();
        let before = model.params();
        let cfg = FedConfig {
            batch_size: 4,
            ..FedConfig::default()
        };
        let part = ClientPartition {
            client_id: 1,
            sample_indices: (0..data.len()).collect(),
        };
        let a = local_train(&model, &data, &part, &cfg, 42).unwrap().unwrap();
        let b = local_train(&model, &data, &part, &cfg, 42).unwrap().unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(model.params(), before);
        assert_ne!(a, before);
    }

    #[test]
    fn empty_partition_is_skip() {
        let data = tiny_data();
        let model =
            crate::nn::build_model_with_input::<f64>(Arch::Lenet5, 2, (1, 16, 16), 3).unwrap();
        let cfg = FedConfig::default();
        let part = ClientPartition {
            client_id: 0,
            sample_indices: vec![],
        };
        assert!(local_train(&model, &data, &part, &cfg, 1).unwrap().is_none());
    }
}
