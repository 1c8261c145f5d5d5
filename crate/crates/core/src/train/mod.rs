//! SGD training with a cosine schedule, evaluation and metrics.

pub mod data;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;

pub use data::{crop_flip, make_batch, Augment, Dataset, DatasetSource, SyntheticParams};

use crate::backbone::{checkpoint, Backbone};
use crate::error::{ensure, Error, Result};
use crate::nn::{zero_grad, EntryMut, Mode, Module, ParamGroup, Rng};
use crate::tensor::Scalar;

pub const METRICS_HEADER: &str = "epoch,train_loss,val_top1,lr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cada";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to batch-norm, bias and position-encoding parameters too.
    pub decay_norm_bias: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_norm_bias: true,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            augment: Augment::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_lr >= 0.0 && self.base_lr.is_finite(), "learning rate must be non-negative");
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)");
        ensure!(self.weight_decay >= 0.0, "weight decay must be non-negative");
        ensure!(self.batch_size >= 1, "batch size must be positive");
        Ok(())
    }
}

/// `base_lr · (1 + cos(π · step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    ensure!(total_steps > 0, "cosine schedule needs at least one step");
    ensure!(step <= total_steps, "step {} beyond schedule length {}", step, total_steps);
    let t = step as f64 / total_steps as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

/// `v ← momentum·v + grad + wd·param; param ← param − lr·v`.
pub fn sgd_step<T: Scalar>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Momentum SGD over every parameter of a module, in visit order.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: Vec<Vec<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_norm_bias: bool,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64, decay_norm_bias: bool) -> Self {
        Sgd { velocity: Vec::new(), momentum, weight_decay, decay_norm_bias }
    }

    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        let mut idx = 0;
        let vel = &mut self.velocity;
        model.visit_mut("", &mut |_, e| {
            if let EntryMut::Param(p) = e {
                if vel.len() <= idx {
                    vel.push(vec![T::zero(); p.value.numel()]);
                }
                let wd = match p.group {
                    ParamGroup::NormOrBias if !self.decay_norm_bias => 0.0,
                    _ => self.weight_decay,
                };
                sgd_step(p.value.data_mut(), p.grad.data(), &mut vel[idx], lr, self.momentum, wd);
                idx += 1;
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for m in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", m.epoch, m.train_loss, m.val_top1, m.lr);
        }
        s
    }
}

fn eval_batches(n: usize, batch: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(batch.max(1)).map(move |s| (s..(s + batch).min(n)).collect())
}

/// Top-1 accuracy in eval mode.
pub fn evaluate<T: Scalar>(model: &mut Backbone<T>, ds: &Dataset, aug: &Augment, batch: usize) -> Result<f64> {
    ensure!(!ds.is_empty(), "cannot evaluate on an empty dataset");
    let mut correct = 0usize;
    for idx in eval_batches(ds.len(), batch) {
        let (x, labels) = make_batch::<T>(ds, &idx, aug, None)?;
        let logits = model.forward(&x, Mode::Eval)?;
        let k = logits.shape().c;
        for (row, &l) in logits.data().chunks(k).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, row[0]), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += (pred == l) as usize;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean per-sample loss without augmentation or parameter updates.
/// Train mode uses batch statistics (and updates the running statistics of `model`).
pub fn mean_loss<T: Scalar>(model: &mut Backbone<T>, ds: &Dataset, aug: &Augment, batch: usize, mode: Mode) -> Result<f64> {
    ensure!(!ds.is_empty(), "cannot compute a loss on an empty dataset");
    let mut total = 0.0;
    for idx in eval_batches(ds.len(), batch) {
        let (x, labels) = make_batch::<T>(ds, &idx, aug, None)?;
        let logits = model.forward(&x, mode)?;
        let (loss, _) = crate::ops::softmax_cross_entropy(&logits, &labels)?;
        total += loss.as_f64() * idx.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Per-epoch minibatches; a trailing partial batch is dropped unless it is the only one.
fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let full = n / batch;
    if full == 0 {
        return vec![order];
    }
    order.chunks(batch).take(full).map(|c| c.to_vec()).collect()
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    (n / batch.max(1)).max(1)
}

/// Trains in place. With `out_dir`, writes the metrics CSV and a checkpoint after every
/// epoch (and an initial checkpoint before the first).
pub fn train_loop(
    model: &mut Backbone<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<History> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "training set is empty");
    ensure!(!val.is_empty(), "validation set is empty");
    cfg.augment.validate(train.channels)?;
    let mut rng = Rng::seed_from_u64(cfg.seed ^ 0x00da_7a00_5eed);
    let total = cfg.epochs * steps_per_epoch(train.len(), cfg.batch_size);
    let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay, cfg.decay_norm_bias);
    let mut history = History::default();
    let write = |history: &History, model: &Backbone<f32>| -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let metrics = dir.join(METRICS_FILE);
            std::fs::write(&metrics, history.to_csv()).map_err(|e| Error::io(&metrics, e))?;
            checkpoint::save(model, &dir.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    };
    write(&history, model)?;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut lr = cfg.base_lr;
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            let (x, labels) = make_batch::<f32>(train, &idx, &cfg.augment, Some(&mut rng))?;
            zero_grad(model);
            let (loss, _) = model.loss(&x, &labels, Mode::Train)?;
            lr = cosine_lr(step, total, cfg.base_lr)?;
            opt.step(model, lr);
            step += 1;
            loss_sum += loss as f64 * idx.len() as f64;
            seen += idx.len();
        }
        let val_top1 = evaluate(model, val, &cfg.augment, cfg.batch_size)?;
        history.epochs.push(EpochMetrics { epoch, train_loss: loss_sum / seen as f64, val_top1, lr });
        write(&history, model)?;
    }
    Ok(history)
}
