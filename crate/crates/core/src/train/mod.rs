//! Training protocol: SGD with momentum and a stepped learning rate,
//! per-epoch metrics, checkpoints, evaluation, the ablation grid and
//! feature-map inspection.

mod ablation;
mod checkpoint;
mod config;
mod inspect;
mod metrics;

pub use ablation::{ablation_cells, cell_config, run_ablation, run_ablation_on, AblationCell, AblationRow};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_into, read_checkpoint, save_checkpoint, CheckpointHeader, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{prepare_mini_cifar10, DatasetConfig, TrainConfig};
pub use inspect::{dump_feature_maps, feature_report, write_pgm, FeatureReport};
pub use metrics::{read_metrics, render_metrics, write_atomic, MetricsRow, METRICS_HEADER};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{batches, compute_normalization, Batch, BatchOptions, Dataset, NormalizationStats};
use crate::error::{ensure, Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossConfig, PermutationTargets};
use crate::models::{build_model, Model, Param};
use crate::tensor::Tape;
use metrics::EpochAccumulator;

/// SGD with momentum and L2 weight decay folded into the gradient:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`. Batch-norm scale and shift are
/// not decayed.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[Param], momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocities: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect() }
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[Option<&[f64]>], lr: f64) -> Result<()> {
        ensure!(params.len() == self.velocities.len(), "optimizer built for {} parameters", self.velocities.len());
        ensure!(grads.len() == params.len(), "{} gradients for {} parameters", grads.len(), params.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocities) {
            let Some(g) = g else {
                return Err(Error::Contract(format!("parameter `{}` has no gradient", p.name)));
            };
            ensure!(g.len() == v.len(), "gradient of `{}` has the wrong size", p.name);
            let decay = if p.kind.decays() { self.weight_decay } else { 0.0 };
            for ((w, &gi), vi) in p.tensor.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + (gi + decay * *w);
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &[f64], classes: usize, labels: &[usize]) -> usize {
    logits.chunks(classes).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// Top-1 accuracy on unpermuted, normalized images in evaluation mode.
pub fn evaluate(model: &mut Model, dataset: &Dataset, stats: &NormalizationStats, batch_size: usize) -> Result<f64> {
    ensure!(!dataset.is_empty(), "cannot evaluate on an empty dataset");
    let classes = model.config().num_classes;
    let mut correct = 0;
    for batch in batches(dataset, &BatchOptions::eval(batch_size, *stats))? {
        let out = model.infer(&batch.images)?;
        correct += count_correct(out.class_logits.data(), classes, &batch.class_labels);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// One optimization step; returns the loss terms and the number of
/// correctly classified samples in the batch.
pub fn train_step(
    model: &mut Model,
    sgd: &mut Sgd,
    batch: &Batch,
    loss: &LossConfig,
    lr: f64,
    step: usize,
) -> Result<(LossBreakdown, usize)> {
    let mut tape = Tape::new();
    let x = tape.constant(&batch.images);
    let (vars, out) = model.forward(&mut tape, x, true)?;
    let perm = if loss.use_permutation_loss {
        let logits = out.perm_logits.ok_or_else(|| Error::Contract("permutation loss needs a permutation head".into()))?;
        Some(PermutationTargets { logits, labels: &batch.perm_labels })
    } else {
        None
    };
    let features = loss.use_feature_loss.then_some(out.tapped_features);
    let (total, breakdown) = total_loss(&mut tape, out.class_logits, &batch.class_labels, perm, features, loss)?;
    if !breakdown.is_finite() {
        return Err(Error::NonFinite { step, terms: format!("{breakdown:?}") });
    }
    let correct = count_correct(tape.value(out.class_logits), model.config().num_classes, &batch.class_labels);
    tape.backward(total)?;
    let grads: Vec<Option<&[f64]>> = vars.iter().map(|&v| tape.grad(v)).collect();
    sgd.step(model.store_mut().params_mut(), &grads, lr)?;
    Ok((breakdown, correct))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub param_count: usize,
    pub final_metrics: MetricsRow,
    pub best_test_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
}

/// A finished run: its report plus the trained model and the normalization
/// it was trained with.
#[derive(Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: Model,
    pub normalization: NormalizationStats,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads the configured datasets and trains.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_set, test_set) = config.dataset.load()?;
    train_on(config, &train_set, &test_set)
}

/// Trains on already-loaded datasets, writing `metrics.csv`, checkpoints
/// and `report.json` under `config.output_dir`.
///
/// Checkpoints: `epoch_NNNN.ckpt` with the state entering each drop epoch,
/// `final.ckpt` after the last epoch, and `best.ckpt` whenever test accuracy
/// improves.
pub fn train_on(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    train_set.validate()?;
    test_set.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config("training and test splits must be non-empty".into()));
    }
    if train_set.num_classes() != config.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but model.num_classes is {}",
            train_set.num_classes(),
            config.model.num_classes
        )));
    }
    let out_dir = &config.output_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let normalization = compute_normalization(train_set)?;
    let mut model = build_model(&config.model, config.master_seed)?;
    let mut sgd = Sgd::new(model.store().params(), config.momentum, config.weight_decay);

    let metrics_path = out_dir.join("metrics.csv");
    let mut rows: Vec<MetricsRow> = Vec::with_capacity(config.total_epochs);
    let mut metrics_text = render_metrics(&rows);
    write_atomic(&metrics_path, metrics_text.as_bytes())?;
    let checkpoint = |model: &Model, epoch: usize, metrics: &str, name: &str| -> Result<PathBuf> {
        let meta = CheckpointMeta {
            epoch,
            metrics_sha256: sha256_hex(metrics.as_bytes()),
            input_height: train_set.height,
            input_width: train_set.width,
            class_names: train_set.class_names.clone(),
            normalization,
            training: Some(config.clone()),
        };
        let path = out_dir.join(name);
        save_checkpoint(model, &meta, &path)?;
        Ok(path)
    };

    let mut step = 0;
    let mut best: Option<(f64, usize)> = None;
    for epoch in 0..config.total_epochs {
        if config.save_checkpoints && config.lr_drop_epochs.contains(&epoch) {
            checkpoint(&model, epoch, &metrics_text, &format!("epoch_{epoch:04}.ckpt"))?;
        }
        let started = Instant::now();
        let lr = config.lr_at_epoch(epoch)?;
        let opts = BatchOptions {
            batch_size: config.batch_size,
            shuffle: true,
            shuffle_seed: config.master_seed,
            augmentation: config.augmentation,
            epoch: epoch as u64,
            photometric: config.photometric,
            normalization,
        };
        let mut acc = EpochAccumulator::default();
        for batch in batches(train_set, &opts)? {
            step += 1;
            let (breakdown, correct) = train_step(&mut model, &mut sgd, &batch, &config.loss, lr, step)?;
            acc.add(&breakdown, batch.class_labels.len(), correct);
        }
        let last = epoch + 1 == config.total_epochs;
        let test_acc = if (epoch + 1) % config.eval_every == 0 || last {
            Some(evaluate(&mut model, test_set, &normalization, config.batch_size)?)
        } else {
            None
        };
        let (losses, train_acc) = acc.finish();
        rows.push(MetricsRow {
            epoch,
            lr,
            losses,
            train_acc,
            test_acc,
            seconds: config.record_wall_clock.then(|| started.elapsed().as_secs_f64()),
        });
        metrics_text = render_metrics(&rows);
        write_atomic(&metrics_path, metrics_text.as_bytes())?;
        if let Some(a) = test_acc {
            if best.is_none_or(|(b, _)| a > b) {
                best = Some((a, epoch));
                if config.save_checkpoints {
                    checkpoint(&model, epoch + 1, &metrics_text, "best.ckpt")?;
                }
            }
        }
    }
    let checkpoint_path = if config.save_checkpoints {
        Some(checkpoint(&model, config.total_epochs, &metrics_text, "final.ckpt")?)
    } else {
        None
    };
    let report = TrainReport {
        epochs: config.total_epochs,
        steps: step,
        param_count: model.param_count(),
        final_metrics: rows.last().expect("at least one epoch").clone(),
        best_test_acc: best.map(|b| b.0),
        best_epoch: best.map(|b| b.1),
        metrics_path,
        checkpoint_path,
    };
    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&report_path, json.as_bytes())?;
    Ok(TrainOutcome { report, model, normalization })
}

/// Accuracy of a stored checkpoint on `dataset`, using the checkpoint's own
/// normalization.
pub fn evaluate_checkpoint(path: &Path, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    let (mut model, header) = load_checkpoint(path)?;
    if dataset.num_classes() != model.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, checkpoint model {}",
            dataset.num_classes(),
            model.config().num_classes
        )));
    }
    evaluate(&mut model, dataset, &header.normalization, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, ParamKind};
    use crate::tensor::Tensor;

    fn param(kind: ParamKind, values: &[f64]) -> Param {
        Param { name: "p".into(), kind, tensor: Tensor::new(&[values.len()], values, false).unwrap() }
    }

    #[test]
    fn sgd_vanilla_and_stationary() {
        let mut ps = vec![param(ParamKind::Weight, &[1.0, -2.0])];
        let mut sgd = Sgd::new(&ps, 0.0, 0.0);
        sgd.step(&mut ps, &[Some(&[0.5, 1.0])], 0.1).unwrap();
        assert_eq!(ps[0].tensor.data(), &[1.0 - 0.05, -2.0 - 0.1]);
        let before = ps[0].tensor.data().to_vec();
        sgd.step(&mut ps, &[Some(&[0.0, 0.0])], 0.1).unwrap();
        assert_eq!(ps[0].tensor.data(), before.as_slice());
    }

    #[test]
    fn sgd_momentum_unrolled() {
        let (lr, g) = (0.1, 0.7);
        let mut ps = vec![param(ParamKind::Weight, &[0.0])];
        let mut sgd = Sgd::new(&ps, 0.9, 0.0);
        sgd.step(&mut ps, &[Some(&[g])], lr).unwrap();
        sgd.step(&mut ps, &[Some(&[g])], lr).unwrap();
        assert!((ps[0].tensor.data()[0] + lr * g * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn sgd_decay_skips_batch_norm() {
        let mut ps = vec![param(ParamKind::Weight, &[2.0]), param(ParamKind::BnScale, &[2.0])];
        let mut sgd = Sgd::new(&ps, 0.0, 0.5);
        sgd.step(&mut ps, &[Some(&[0.0]), Some(&[0.0])], 0.1).unwrap();
        assert_eq!(ps[0].tensor.data(), &[2.0 - 0.1 * 1.0]);
        assert_eq!(ps[1].tensor.data(), &[2.0]);
        assert!(sgd.step(&mut ps, &[Some(&[0.0]), None], 0.1).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let c = ModelConfig { base_width: 2, num_classes: 3, ..ModelConfig::default() };
        let mut model = build_model(&c, 0).unwrap();
        let mut sgd = Sgd::new(model.store().params(), 0.9, 0.0);
        let mut img = Tensor::zeros(&[1, 3, 8, 8]);
        img.data_mut()[5] = f64::NAN;
        let batch = Batch { images: img, class_labels: vec![0], perm_labels: vec![0], indices: vec![0] };
        let err = train_step(&mut model, &mut sgd, &batch, &LossConfig::baseline(), 0.1, 17).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 17, .. }));
        assert_eq!(err.exit_code(), 3);
    }
}
