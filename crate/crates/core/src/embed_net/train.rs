//! Mini-batch SGD-with-momentum training of the embedding network, plus
//! learning-rate tuning and the cross-entropy baseline trainer.
//!
//! Batches are built by P x Q sampling: P devices, Q frames each, so every
//! example has positives to mine against. A held-out slice of the training
//! set serves as validation; the parameters returned are the snapshot from
//! the epoch with the lowest validation loss, not the final epoch.
//!
//! Everything is deterministic given `TrainConfig::seed`: batch order,
//! shuffles, and arithmetic (single-threaded f64).

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::signal_io::{split_dataset, FrameExample, LabeledDataset, SplitMode};

use super::loss::{batch_hinge_mean, cross_entropy_backward, cross_entropy_loss, MiningOutcome};
use super::{
    apply_bn_updates, forward_traced, loss::mine_triplets, BnUpdates, ForwardMode, Gradients,
    Parameters,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Training hyperparameters. The defaults are the reference recipe:
/// margin 0.1, momentum 0.9, batch 64 (8 devices x 8 frames), 100 epochs,
/// and a six-decade learning-rate grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub devices_per_batch: usize,
    pub epochs: usize,
    pub lr_grid: Vec<f64>,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            devices_per_batch: 8,
            epochs: 100,
            lr_grid: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidInput(format!("margin must be positive, got {}", self.margin)));
        }
        if self.batch_size < 4 || self.devices_per_batch < 2 {
            return Err(Error::InvalidInput(
                "need batch_size >= 4 with at least 2 devices per batch".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "validation_fraction must be in (0,1), got {}",
                self.validation_fraction
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidInput(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One epoch of history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-batch loss (batches without surviving triplets count as 0).
    pub train_loss: f64,
    /// Mean batch-hard hinge on the held-out slice, in infer mode; `None`
    /// when no validation batch had both a positive and a negative.
    pub val_loss: Option<f64>,
    pub batches: usize,
    pub batches_without_triplets: usize,
}

/// A finished training run: the best-epoch snapshot and how it got there.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub history: Vec<EpochStats>,
    /// Epoch whose snapshot `params` is; `None` when epochs = 0.
    pub best_epoch: Option<usize>,
    /// The validation metric of the best epoch.
    pub best_val_loss: Option<f64>,
}

// ---------------------------------------------------------------------------
// Gradient of one batch
// ---------------------------------------------------------------------------

/// One gradient evaluation: gradients, the batch's mean surviving-triplet
/// loss, mining diagnostics, and the batch-norm running-stat updates.
pub struct GradStep {
    pub grads: Gradients,
    pub mean_loss: f64,
    pub mining: MiningOutcome,
    pub bn_updates: BnUpdates,
}

/// Analytic gradient of the mean mined-triplet loss over one batch.
/// A batch with no surviving triplets yields zero gradients.
pub fn gradient(
    params: &Parameters,
    frames: &[&FrameExample],
    labels: &[u32],
    cfg: &TrainConfig,
) -> Result<GradStep> {
    let x = super::batch_input(params, frames)?;
    let (trace, updates) = forward_traced(params, x, ForwardMode::Train)?;
    let bn_updates = updates.expect("train mode returns updates");
    let mining = mine_triplets(&trace.embeddings, labels, cfg.margin);
    if mining.triplets.is_empty() {
        return Ok(GradStep {
            grads: Gradients::zeros_like(params),
            mean_loss: 0.0,
            mining,
            bn_updates,
        });
    }

    let emb = &trace.embeddings;
    let t_count = mining.triplets.len() as f64;
    let mut mean_loss = 0.0;
    let mut d_emb = ndarray::Array2::<f64>::zeros(emb.raw_dim());
    for t in &mining.triplets {
        let (a, p, n) = (t.anchor, t.positive, t.negative);
        let mut d_ap = 0.0;
        let mut d_an = 0.0;
        for k in 0..emb.ncols() {
            d_ap += (emb[[a, k]] - emb[[p, k]]).powi(2);
            d_an += (emb[[a, k]] - emb[[n, k]]).powi(2);
        }
        mean_loss += (d_ap - d_an + cfg.margin).max(0.0);
        // Mined triplets have positive loss, so the hinge is active and
        // d loss = d(|a-p|^2 - |a-n|^2).
        let scale = 2.0 / t_count;
        for k in 0..emb.ncols() {
            let ap = emb[[a, k]] - emb[[p, k]];
            let an = emb[[a, k]] - emb[[n, k]];
            d_emb[[a, k]] += scale * (ap - an);
            d_emb[[p, k]] -= scale * ap;
            d_emb[[n, k]] += scale * an;
        }
    }
    mean_loss /= t_count;
    if !mean_loss.is_finite() {
        return Err(Error::NonFiniteActivation { layer: "loss".into() });
    }
    let grads = super::backward_traced(params, &trace, &d_emb);
    Ok(GradStep {
        grads,
        mean_loss,
        mining,
        bn_updates,
    })
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

/// P x Q batch builder: each batch takes `q` frames from each of `p`
/// distinct devices. Per-device streams reshuffle when exhausted, so small
/// devices recycle within an epoch.
struct PqSampler {
    queues: BTreeMap<u32, (Vec<usize>, usize)>,
    device_ids: Vec<u32>,
    p: usize,
    q: usize,
}

impl PqSampler {
    fn new(ds: &LabeledDataset, cfg: &TrainConfig, rng: &mut impl Rng) -> Self {
        let p = cfg.devices_per_batch.min(ds.device_ids.len());
        let q = (cfg.batch_size / p).max(1);
        let mut queues = BTreeMap::new();
        for (dev, mut idx) in ds.indices_by_device() {
            idx.shuffle(rng);
            queues.insert(dev, (idx, 0));
        }
        Self {
            queues,
            device_ids: ds.device_ids.clone(),
            p,
            q,
        }
    }

    fn next_batch(&mut self, rng: &mut impl Rng) -> Vec<usize> {
        let mut chosen: Vec<u32> = self
            .device_ids
            .choose_multiple(rng, self.p)
            .copied()
            .collect();
        chosen.sort_unstable();
        let mut batch = Vec::with_capacity(self.p * self.q);
        for dev in chosen {
            let (order, cursor) = self.queues.get_mut(&dev).expect("device known");
            for _ in 0..self.q {
                if *cursor >= order.len() {
                    order.shuffle(rng);
                    *cursor = 0;
                }
                batch.push(order[*cursor]);
                *cursor += 1;
            }
        }
        batch
    }
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

/// One momentum step on flat vectors: `v = momentum*v + g`, then
/// `w -= lr*v`.
fn sgd_momentum_step(weights: &mut [f64], velocity: &mut [f64], grad: &[f64], momentum: f64, lr: f64) {
    for ((w, v), g) in weights.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// Split off the held-out validation slice (per device, the trailing
/// fraction) and freeze its batch composition for the whole run.
fn validation_batches(
    val: &LabeledDataset,
    batch_size: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..val.len()).collect();
    let mut rng = seeds::rng_for(seed, "val-batches");
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn validation_loss(params: &Parameters, val: &LabeledDataset, batches: &[Vec<usize>], margin: f64) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let frames: Vec<&FrameExample> = batch.iter().map(|&i| &val.frames[i]).collect();
        let labels: Vec<u32> = batch.iter().map(|&i| val.frames[i].device_id).collect();
        let (emb, _) = super::forward_batch(params, &frames, ForwardMode::Infer)?;
        if let Some(hinge) = batch_hinge_mean(&emb, &labels, margin) {
            total += hinge;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Train the embedding network with mined triplets, returning the snapshot
/// from the epoch with the lowest validation loss.
pub fn train(init: &Parameters, train_set: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.device_ids.len() < 2 {
        return Err(Error::InvalidInput(
            "training needs at least 2 devices for triplet mining".into(),
        ));
    }
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            params: init.clone(),
            history: vec![],
            best_epoch: None,
            best_val_loss: None,
        });
    }
    let (fit, val) = split_dataset(train_set, 1.0 - cfg.validation_fraction, SplitMode::Contiguous)?;
    let val_batches = validation_batches(&val, cfg.batch_size, cfg.seed);

    let mut params = init.clone();
    let mut velocity = vec![0.0; params.num_trainable()];
    let batches_per_epoch = (fit.len() / cfg.batch_size).max(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Parameters)> = None;

    for epoch in 0..cfg.epochs {
        let mut rng = seeds::rng_for_indexed(cfg.seed, "epoch", epoch as u64);
        let mut sampler = PqSampler::new(&fit, cfg, &mut rng);
        let mut loss_sum = 0.0;
        let mut dry_batches = 0usize;
        for batch_no in 0..batches_per_epoch {
            let batch = sampler.next_batch(&mut rng);
            let frames: Vec<&FrameExample> = batch.iter().map(|&i| &fit.frames[i]).collect();
            let labels: Vec<u32> = batch.iter().map(|&i| fit.frames[i].device_id).collect();
            let step = gradient(&params, &frames, &labels, cfg).map_err(|_| Error::Diverged {
                epoch,
                batch: batch_no,
            })?;
            apply_bn_updates(&mut params, &step.bn_updates);
            if step.mining.triplets.is_empty() {
                dry_batches += 1;
                continue;
            }
            loss_sum += step.mean_loss;
            let mut flat = params.flatten_trainable();
            sgd_momentum_step(
                &mut flat,
                &mut velocity,
                &step.grads.flatten(),
                cfg.momentum,
                cfg.learning_rate,
            );
            if flat.iter().any(|w| !w.is_finite()) {
                return Err(Error::Diverged { epoch, batch: batch_no });
            }
            params.set_trainable(&flat);
        }
        let val_loss = validation_loss(&params, &val, &val_batches, cfg.margin)
            .map_err(|_| Error::Diverged { epoch, batch: batches_per_epoch })?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_loss,
            batches: batches_per_epoch,
            batches_without_triplets: dry_batches,
        });
        // Lowest validation loss wins; earlier epoch wins ties. Epochs
        // without a validation metric never displace one that has it.
        let metric = val_loss.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(m, _, _)| metric < *m) {
            best = Some((metric, epoch, params.clone()));
        }
    }
    let (best_metric, best_epoch, best_params) = best.expect("epochs > 0");
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch: Some(best_epoch),
        best_val_loss: best_metric.is_finite().then_some(best_metric),
    })
}

/// Outcome of probing one learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrProbe {
    pub rate: f64,
    pub best_val_loss: Option<f64>,
    pub diverged: bool,
}

/// Train one model per grid rate (each from the same initialization) and
/// return the rate whose best epoch had the lowest validation loss, with
/// ties broken toward the smaller rate. Divergent rates are excluded;
/// every rate diverging is an error.
pub fn tune_learning_rate(
    init: &Parameters,
    train_set: &LabeledDataset,
    cfg: &TrainConfig,
    probe_epochs: Option<usize>,
) -> Result<(f64, Vec<LrProbe>)> {
    if cfg.lr_grid.is_empty() {
        return Err(Error::InvalidInput("learning-rate grid is empty".into()));
    }
    let mut probes = Vec::new();
    let mut best: Option<(f64, f64)> = None; // (val_loss, rate)
    for &rate in &cfg.lr_grid {
        let probe_cfg = TrainConfig {
            learning_rate: rate,
            epochs: probe_epochs.unwrap_or(cfg.epochs),
            ..cfg.clone()
        };
        match train(init, train_set, &probe_cfg) {
            Ok(outcome) => {
                let metric = outcome.best_val_loss.unwrap_or(f64::INFINITY);
                probes.push(LrProbe {
                    rate,
                    best_val_loss: outcome.best_val_loss,
                    diverged: false,
                });
                let wins = best.is_none_or(|(m, r)| metric < m || (metric == m && rate < r));
                if wins {
                    best = Some((metric, rate));
                }
            }
            Err(Error::Diverged { .. }) => {
                probes.push(LrProbe {
                    rate,
                    best_val_loss: None,
                    diverged: true,
                });
            }
            Err(other) => return Err(other),
        }
    }
    match best {
        Some((_, rate)) => Ok((rate, probes)),
        None => Err(Error::AllRatesDiverged),
    }
}

// ---------------------------------------------------------------------------
// Baseline trainer (cross entropy)
// ---------------------------------------------------------------------------

/// Map device ids to class indices 0..n in sorted order.
pub fn class_index_map(ds: &LabeledDataset) -> BTreeMap<u32, usize> {
    ds.device_ids.iter().enumerate().map(|(i, &d)| (d, i)).collect()
}

/// Train the closed-set baseline: same trunk, one logit per device,
/// softmax cross entropy. Best epoch by validation cross entropy.
pub fn train_vanilla(
    init: &Parameters,
    train_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = class_index_map(train_set);
    if init.config.embedding_dim != classes.len() {
        return Err(Error::InvalidInput(format!(
            "baseline head has {} logits but the dataset has {} devices",
            init.config.embedding_dim,
            classes.len()
        )));
    }
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            params: init.clone(),
            history: vec![],
            best_epoch: None,
            best_val_loss: None,
        });
    }
    let (fit, val) = split_dataset(train_set, 1.0 - cfg.validation_fraction, SplitMode::Contiguous)?;
    let val_refs: Vec<&FrameExample> = val.frames.iter().collect();
    let val_labels: Vec<usize> = val.frames.iter().map(|f| classes[&f.device_id]).collect();

    let mut params = init.clone();
    let mut velocity = vec![0.0; params.num_trainable()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Parameters)> = None;

    for epoch in 0..cfg.epochs {
        let mut rng = seeds::rng_for_indexed(cfg.seed, "vanilla-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let frames: Vec<&FrameExample> = chunk.iter().map(|&i| &fit.frames[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| classes[&fit.frames[i].device_id]).collect();
            let step = (|| -> Result<(f64, Gradients, BnUpdates)> {
                let x = super::batch_input(&params, &frames)?;
                let (trace, updates) = forward_traced(&params, x, ForwardMode::Train)?;
                let logits = &trace.embeddings;
                let mut loss = 0.0;
                for (row, &lab) in logits.outer_iter().zip(&labels) {
                    loss += cross_entropy_loss(&row, lab)?;
                }
                loss /= labels.len() as f64;
                let d_logits = cross_entropy_backward(logits, &labels);
                let grads = super::backward_traced(&params, &trace, &d_logits);
                Ok((loss, grads, updates.expect("train mode")))
            })()
            .map_err(|e| match e {
                Error::InvalidInput(_) => e,
                _ => Error::Diverged { epoch, batch: batch_no },
            })?;
            let (loss, grads, bn_updates) = step;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_no });
            }
            apply_bn_updates(&mut params, &bn_updates);
            loss_sum += loss;
            batches += 1;
            let mut flat = params.flatten_trainable();
            sgd_momentum_step(&mut flat, &mut velocity, &grads.flatten(), cfg.momentum, cfg.learning_rate);
            if flat.iter().any(|w| !w.is_finite()) {
                return Err(Error::Diverged { epoch, batch: batch_no });
            }
            params.set_trainable(&flat);
        }
        // Validation cross entropy in infer mode, computed batched.
        let mut val_sum = 0.0;
        for (chunk, labs) in val_refs.chunks(cfg.batch_size).zip(val_labels.chunks(cfg.batch_size)) {
            let (logits, _) = super::forward_batch(&params, chunk, ForwardMode::Infer)
                .map_err(|_| Error::Diverged { epoch, batch: batches })?;
            for (row, &lab) in logits.outer_iter().zip(labs) {
                val_sum += cross_entropy_loss(&row, lab)?;
            }
        }
        let val_loss = val_sum / val_refs.len() as f64;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss: Some(val_loss),
            batches,
            batches_without_triplets: 0,
        });
        if best.as_ref().is_none_or(|(m, _, _)| val_loss < *m) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }
    let (best_metric, best_epoch, best_params) = best.expect("epochs > 0");
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch: Some(best_epoch),
        best_val_loss: Some(best_metric),
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
