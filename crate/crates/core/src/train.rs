//! Fine-tuning and linear probing.
//!
//! Fine-tuning trains every parameter with AdamW under a warmup-then-cosine
//! learning rate and a cosine weight-decay ramp, keeping the epoch with the
//! best validation accuracy. Probing re-initializes the classifier and
//! trains only it with momentum SGD.

use std::f64::consts::PI;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::context::{ContextViT, ForwardOptions};
use crate::data::{make_batches, DatasetSplit, SamplerKind};
use crate::error::{Error, Result};
use crate::eval::evaluate_split;
use crate::numerics::{derive_seed, Graph, Tensor};
use crate::params::{Linear, ParamId, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Finetune,
    Probe,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Self::Finetune),
            "probe" => Ok(Self::Probe),
            other => Err(Error::InvalidArgument(format!("unknown train mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay_start: f64,
    pub weight_decay_end: f64,
    pub seed: u64,
    pub sampler: SamplerKind,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            eval_batch_size: 64,
            base_lr: 1e-3,
            final_lr: 1e-5,
            warmup_epochs: 2,
            weight_decay_start: 0.04,
            weight_decay_end: 0.4,
            seed: 0,
            sampler: SamplerKind::Uniform,
            mode: TrainMode::Finetune,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        if !(self.base_lr > 0.0 && self.final_lr > 0.0) || !self.base_lr.is_finite() || !self.final_lr.is_finite() {
            return bad("learning rates must be positive and finite");
        }
        if !(self.weight_decay_start >= 0.0 && self.weight_decay_end >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            final_lr: self.final_lr,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            total_steps: self.epochs * steps_per_epoch,
            wd_start: self.weight_decay_start,
            wd_end: self.weight_decay_end,
        }
    }
}

/// Step-indexed learning-rate and weight-decay schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub wd_start: f64,
    pub wd_end: f64,
}

impl Schedule {
    /// `(lr, wd)` at `step`, `0 ≤ step < total_steps`. The learning rate
    /// rises linearly from 0 and reaches `base_lr` at `warmup_steps`, then
    /// follows a half cosine down to `final_lr` at the last step. Weight
    /// decay follows a half cosine from `wd_start` up to `wd_end`.
    pub fn at(&self, step: usize) -> (f64, f64) {
        let last = self.total_steps.saturating_sub(1);
        let step = step.min(last);
        let lr = if step < self.warmup_steps {
            self.base_lr * step as f64 / self.warmup_steps as f64
        } else {
            let span = last.saturating_sub(self.warmup_steps);
            let t = if span == 0 { 1.0 } else { (step - self.warmup_steps) as f64 / span as f64 };
            cosine(self.base_lr, self.final_lr, t)
        };
        let t = if last == 0 { 1.0 } else { step as f64 / last as f64 };
        (lr, cosine(self.wd_start, self.wd_end, t))
    }
}

fn cosine(from: f64, to: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return from;
    }
    if t >= 1.0 {
        return to;
    }
    to + 0.5 * (from - to) * (1.0 + (PI * t).cos())
}

/// AdamW moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

fn check_grads(store: &ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::shape("optimizer", format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (id, g) in store.ids().zip(grads) {
        if let Some(g) = g {
            let e = store.entry(id);
            if g.shape() != e.value.shape() {
                return Err(Error::shape("optimizer", format!("gradient of {} has shape {:?}", e.name, g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", e.name)));
            }
        }
    }
    Ok(())
}

/// One AdamW step with decoupled weight decay. Parameters whose gradient
/// is `None` are left untouched; decay applies only to entries flagged for it.
pub fn adamw_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut OptimState, lr: f64, wd: f64) -> Result<()> {
    // lr = 0 is allowed: the first warmup step only accumulates moments.
    if !(lr >= 0.0) || !(wd >= 0.0) {
        return Err(Error::InvalidArgument(format!("lr {lr} and wd {wd} must be non-negative")));
    }
    check_grads(store, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let ids: Vec<ParamId> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let Some(g) = &grads[k] else { continue };
        let decay = store.entry(id).decay;
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            let shrink = if decay { lr * wd * p[i] } else { 0.0 };
            p[i] -= lr * update + shrink;
        }
    }
    Ok(())
}

/// Heavy-ball momentum SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            velocity: store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
        }
    }
}

pub fn sgd_momentum_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut SgdState, lr: f64) -> Result<()> {
    check_grads(store, grads)?;
    let ids: Vec<ParamId> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let Some(g) = &grads[k] else { continue };
        let v = state.velocity[k].data_mut();
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            v[i] = MOMENTUM * v[i] + g.data()[i];
            p[i] -= lr * v[i];
        }
    }
    Ok(())
}

/// One row of the per-epoch metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub kind: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epoch_train_loss: Vec<f64>,
    /// Mean loss over the first epoch's steps, in order.
    pub first_epoch_losses: Vec<f64>,
    pub wall_seconds: f64,
    pub rows: Vec<MetricRow>,
}

struct Snapshot {
    params: ParamStore,
    ema: Option<crate::context::EmaState>,
}

/// Trains all parameters of `model` jointly and restores the epoch with the
/// best validation accuracy (the earliest on ties).
pub fn fine_tune(model: &mut ContextViT, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    run(model, data, cfg, TrainMode::Finetune)
}

/// Replaces the classifier with a fresh one and trains only it with
/// momentum SGD; backbone and context parameters stay bit-identical.
pub fn linear_probe(model: &mut ContextViT, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    reset_head(model, derive_seed(cfg.seed, "probe_head", 0))?;
    run(model, data, cfg, TrainMode::Probe)
}

fn reset_head(model: &mut ContextViT, seed: u64) -> Result<()> {
    let mut scratch = ParamStore::new();
    let fresh = Linear::new(&mut scratch, "head", model.config.dim, model.config.num_classes, seed)?;
    *model.params.get_mut(model.head.weight) = scratch.get(fresh.weight).clone();
    *model.params.get_mut(model.head.bias) = scratch.get(fresh.bias).clone();
    Ok(())
}

fn run(model: &mut ContextViT, data: &DatasetSplit, cfg: &TrainConfig, mode: TrainMode) -> Result<TrainReport> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Empty("train and val splits must be non-empty".into()));
    }
    let start = Instant::now();
    let kind = model.kind.to_string();
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(steps_per_epoch);
    let mut adam = OptimState::new(&model.params);
    let mut sgd = SgdState::new(&model.params);
    let head = [model.head.weight, model.head.bias];
    let trainable = |id: ParamId| mode == TrainMode::Finetune || head.contains(&id);

    let mut rows = Vec::new();
    let mut epoch_train_loss = Vec::new();
    let mut first_epoch_losses = Vec::new();
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(&data.train, cfg.batch_size, cfg.sampler, derive_seed(cfg.seed, "epoch", epoch as u64))?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in batches {
            let (lr, wd) = schedule.at(step);
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, trainable);
            let opts = ForwardOptions {
                seed: derive_seed(cfg.seed, "step", step as u64),
                ..ForwardOptions::default()
            };
            let out = model.forward(&mut g, &p, &batch, &opts)?;
            let loss = g.cross_entropy(out.logits, &batch.labels)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {value} at epoch {epoch}, step {step}, lr {lr:.3e}, kind {kind}, seed {}",
                    cfg.seed
                )));
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Option<Tensor>> = model
                .params
                .ids()
                .map(|id| trainable(id).then(|| grads.get_or_zeros(p[id])))
                .collect();
            match mode {
                TrainMode::Finetune => adamw_step(&mut model.params, &grads, &mut adam, lr, wd)?,
                TrainMode::Probe => sgd_momentum_step(&mut model.params, &grads, &mut sgd, lr)?,
            }
            if mode == TrainMode::Finetune {
                model.commit_ema(&out)?;
            }
            let logits = g.value(out.logits);
            correct += count_correct(logits, &batch.labels);
            seen += batch.len();
            loss_sum += value * batch.len() as f64;
            if epoch == 0 {
                first_epoch_losses.push(value);
            }
            step += 1;
        }
        let train_loss = loss_sum / seen as f64;
        epoch_train_loss.push(train_loss);
        let val = evaluate_split(model, &data.val, cfg.eval_batch_size)?;
        let mut row = |split: &str, metric: &str, value: f64| {
            rows.push(MetricRow {
                epoch,
                split: split.to_string(),
                metric: metric.to_string(),
                value,
                seed: cfg.seed,
                kind: kind.clone(),
            })
        };
        row("train", "loss", train_loss);
        row("train", "accuracy", correct as f64 / seen as f64);
        row("val", "accuracy", val.accuracy);
        if best.as_ref().is_none_or(|(acc, _, _)| val.accuracy > *acc) {
            let snap = Snapshot {
                params: model.params.clone(),
                ema: model.ema.clone(),
            };
            best = Some((val.accuracy, epoch, snap));
        }
    }
    let (best_val_accuracy, best_epoch, snap) = best.expect("at least one epoch");
    model.params = snap.params;
    model.ema = snap.ema;
    Ok(TrainReport {
        mode,
        kind,
        seed: cfg.seed,
        epochs_run: cfg.epochs,
        steps: step,
        best_epoch,
        best_val_accuracy,
        epoch_train_loss,
        first_epoch_losses,
        wall_seconds: start.elapsed().as_secs_f64(),
        rows,
    })
}

/// Number of rows whose arg-max (first on ties) equals the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let (rows, cols) = logits.as_matrix_dims();
    (0..rows)
        .filter(|&r| argmax(&logits.data()[r * cols..(r + 1) * cols]) == labels[r])
        .count()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
