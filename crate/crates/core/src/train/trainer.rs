use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, DfcaNet, LoadMode, LoadReport, Task};
use crate::nn::{apply_stat_updates, Adam, AdamConfig, Mode};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Share of the training split held out for model selection.
    pub val_fraction: f64,
    /// Training-stream augmentation; `None` disables it.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            dropout: 0.2,
            seed: 0,
            val_fraction: 0.1,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Counted from 1.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Percentage.
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    /// Epoch whose weights were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

/// The epoch with the highest validation accuracy; the earliest wins ties.
pub fn select_best(history: &[EpochStats]) -> Option<usize> {
    let mut best: Option<&EpochStats> = None;
    for h in history {
        if best.is_none_or(|b| h.val_acc > b.val_acc) {
            best = Some(h);
        }
    }
    best.map(|b| b.epoch)
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((epoch as u64) << 32) ^ batch as u64
}

/// Predicted class per output row.
pub fn decide<T: Scalar>(task: Task, probs: &Tensor<T>, threshold: f64) -> Vec<usize> {
    match task {
        Task::Pad => probs.data().iter().map(|p| usize::from(p.to_f64_lossy() >= threshold)).collect(),
        Task::Lens { classes } => probs
            .data()
            .chunks(classes)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect(),
    }
}

/// Mean loss, accuracy (percent) and output probabilities over `data` in infer mode.
pub fn infer<T: Scalar>(model: &DfcaNet<T>, data: &Dataset, batch_size: usize) -> Result<(f64, f64, Tensor<T>)> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let outputs = model.config().task.outputs();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let mut probs = Vec::with_capacity(data.len() * outputs);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let b = data.batch(chunk, None)?;
        let mut s = model.session(0)?;
        let x = s.input(b.images.cast::<T>());
        let out = model.forward(&mut s, x)?;
        let loss = model.loss(&mut s, &out, &b.targets)?;
        loss_sum += s.value(loss).item().to_f64_lossy() * chunk.len() as f64;
        let p = s.value(out.probs);
        let pred = decide(model.config().task, p, 0.5);
        correct += pred.iter().zip(&b.targets).filter(|(a, b)| a == b).count();
        probs.extend_from_slice(p.data());
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, 100.0 * correct as f64 / n, Tensor::from_vec(&[data.len(), outputs], probs)?))
}

/// Minibatch Adam training that keeps the weights of the epoch with the best
/// validation accuracy. `on_epoch` sees each epoch's statistics as they land.
pub fn train_with<T: Scalar>(
    model: &mut DfcaNet<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!("training needs samples ({} train, {} validation)", train.len(), val.len())));
    }
    // Adam rejects a zero step size; lr = 0 runs the epochs without updates.
    let mut adam = if cfg.lr > 0.0 { Some(Adam::new(cfg.adam())?) } else { None };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, crate::nn::ParamStore<T>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        model.set_mode(Mode::Train);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(batch_seed(cfg.seed, epoch, usize::MAX)));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let aug = cfg.augment.as_ref().map(|a| (a, epoch as u64 ^ cfg.seed.rotate_left(17)));
            let b = train.batch(chunk, aug)?;
            let (grads, updates, loss) = {
                let mut s = model.session(batch_seed(cfg.seed, epoch, bi))?;
                let x = s.input(b.images.cast::<T>());
                let out = model.forward(&mut s, x)?;
                let loss = model.loss(&mut s, &out, &b.targets)?;
                let value = s.value(loss).item().to_f64_lossy();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("training loss became {value} at epoch {epoch}, batch {}", bi + 1)));
                }
                let grads = s.backward(loss)?;
                (grads, s.into_stat_updates(), value)
            };
            apply_stat_updates(model.store_mut(), updates)?;
            if let Some(adam) = adam.as_mut() {
                adam.step(model.store_mut(), &grads)?;
            }
            loss_sum += loss * chunk.len() as f64;
        }
        model.set_mode(Mode::Infer);
        let (val_loss, val_acc, _) = infer(model, val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss became {val_loss} at epoch {epoch}")));
        }
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_acc,
        };
        on_epoch(&stats);
        if best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
            best = Some((val_acc, model.store().clone()));
        }
        history.push(stats);
    }
    if let Some((_, store)) = best {
        *model.store_mut() = store;
    }
    model.set_mode(Mode::Infer);
    Ok(TrainOutcome {
        best_epoch: select_best(&history),
        history,
    })
}

pub fn train<T: Scalar>(model: &mut DfcaNet<T>, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train, val, cfg, &mut |_| {})
}

/// Loads every same-shaped tensor of `checkpoint` into the model, then trains.
/// Fails when any backbone tensor cannot be transferred.
pub fn finetune<T: Scalar>(
    model: &mut DfcaNet<T>,
    checkpoint: &Path,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(TrainOutcome, LoadReport)> {
    let report = transfer(model, &Checkpoint::load(checkpoint)?)?;
    let outcome = train_with(model, train, val, cfg, on_epoch)?;
    Ok((outcome, report))
}

/// Transfer-loads `ck`, requiring the whole backbone to match.
pub fn transfer<T: Scalar>(model: &mut DfcaNet<T>, ck: &Checkpoint) -> Result<LoadReport> {
    let report = ck.load_into(model.store_mut(), &LoadMode::Transfer { prefixes: vec![] })?;
    let missing: Vec<&String> = report.skipped.iter().filter(|n| n.starts_with("backbone.")).collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match the backbone configuration: {}",
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(report)
}
