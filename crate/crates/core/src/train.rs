//! Optimiser, learning-rate schedule, training loop and evaluation.

use std::fmt::Write as _;

use crate::config::{RunConfig, TrainConfig};
use crate::data::{batch, target_accuracy, KeyPatchTask, Sample};
use crate::error::{bail, Result};
use crate::model::{predict, segmentation_loss, Confusion, Metrics, SegModel};
use crate::nn::Module;
use crate::rng::SeededRng;
use crate::tensor::{no_grad, Scalar, Tensor};

/// `lr0 · (1 − t/T)^power`, clamped to zero past `T`.
pub fn poly_lr(lr0: f64, power: f64, step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total as f64).powf(power)
}

/// Adam with decoupled weight decay. Moments are kept in 64-bit.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub t: u32,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay, t: 0, m: vec![], v: vec![] }
    }

    /// One update of every tensor in `params` from its accumulated gradient
    /// (missing gradients count as zero):
    ///
    /// ```text
    /// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
    /// p ← p − lr·( m̂ / (√v̂ + ε) + λ·p )
    /// ```
    pub fn step<T: Scalar>(&mut self, params: &[Tensor<T>], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || params.iter().zip(&self.m).any(|(p, m)| p.numel() != m.len()) {
            bail!(Dimension, "optimizer state does not match the parameter list");
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad();
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].as_f64());
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                let w = data[i].as_f64();
                data[i] = T::from_f64(w - lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w));
            }
        }
        Ok(())
    }
}

// ── Training ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// Optimiser steps completed.
    pub step: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// mIoU of the epoch's training predictions.
    pub miou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss,miou\n");
        for r in &self.rows {
            writeln!(s, "{},{:e},{:.8},{:.6}", r.step, r.lr, r.loss, r.miou).expect("write to string");
        }
        s
    }
}

/// Total optimiser steps and steps per epoch for `n` samples.
pub fn schedule_length(cfg: &TrainConfig, n: usize) -> (usize, usize) {
    let per_epoch = n.div_ceil(cfg.batch).max(1);
    let total = if cfg.steps > 0 { cfg.steps } else { cfg.epochs * per_epoch };
    (total, per_epoch)
}

/// Trains `model` on `samples`; a pure function of the inputs and `seed`.
pub fn train<T: Scalar>(
    model: &SegModel<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainLog> {
    if samples.is_empty() {
        bail!(Config, "no training samples");
    }
    if cfg.batch == 0 {
        bail!(Config, "batch must be positive");
    }
    let patch = model.config.patch;
    let classes = model.config.classes;
    let square = model.config.image_height == model.config.image_width;
    let params: Vec<Tensor<T>> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let mut opt = Adam::new(cfg);
    let (total, per_epoch) = schedule_length(cfg, samples.len());
    let mut rng = SeededRng::stream(seed, u64::MAX);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog::default();
    let (mut loss_sum, mut batches) = (0.0, 0usize);
    let mut confusion = Confusion::new(classes);
    for step in 0..total {
        let pos = step % per_epoch;
        if pos == 0 {
            rng.shuffle(&mut order);
        }
        let idx = &order[pos * cfg.batch..((pos + 1) * cfg.batch).min(order.len())];
        let augmented: Vec<Sample> = idx
            .iter()
            .map(|&i| {
                if cfg.augment {
                    let flip = rng.coin();
                    let turns = if square { rng.below(0, 4) } else { 2 * rng.below(0, 2) };
                    samples[i].transformed(flip, turns)
                } else {
                    Ok(samples[i].clone())
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Sample> = augmented.iter().collect();
        let (images, labels) = batch::<T>(&refs, patch)?;
        let logits = model.forward(&images)?;
        let loss = segmentation_loss(&logits, &labels, None)?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            bail!(Numeric, "loss is {value} at step {step}");
        }
        params.iter().for_each(|p| p.zero_grad());
        loss.backward()?;
        let lr = poly_lr(cfg.lr, cfg.poly_power, step, total);
        opt.step(&params, lr)?;
        loss_sum += value;
        batches += 1;
        confusion.add(&predict(&logits), &labels)?;
        if pos + 1 == per_epoch || step + 1 == total {
            let row = LogRow { step: step + 1, lr, loss: loss_sum / batches as f64, miou: confusion.metrics().miou };
            on_epoch(&row);
            log.rows.push(row);
            loss_sum = 0.0;
            batches = 0;
            confusion = Confusion::new(classes);
        }
    }
    params.iter().for_each(|p| p.zero_grad());
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub metrics: Metrics,
    /// Accuracy on tokens whose true class is a target class.
    pub target_accuracy: Option<f64>,
}

/// Token-level evaluation without gradient tracking.
pub fn evaluate<T: Scalar>(model: &SegModel<T>, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        bail!(Config, "no evaluation samples");
    }
    let (mut preds, mut truth) = (Vec::new(), Vec::new());
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, labels) = batch::<T>(&refs, model.config.patch)?;
        let logits = no_grad(|| model.forward(&images))?;
        let loss = no_grad(|| segmentation_loss(&logits, &labels, None))?.item().as_f64();
        if !loss.is_finite() {
            bail!(Numeric, "evaluation loss is {loss}");
        }
        loss_sum += loss * labels.len() as f64;
        tokens += labels.len();
        preds.extend(predict(&logits));
        truth.extend(labels);
    }
    let mut c = Confusion::new(model.config.classes);
    c.add(&preds, &truth)?;
    Ok(EvalReport {
        samples: samples.len(),
        loss: loss_sum / tokens as f64,
        metrics: c.metrics(),
        target_accuracy: target_accuracy(&preds, &truth),
    })
}

/// Generates the key-patch data for `cfg` (eval samples continue the index
/// sequence), trains a fresh 32-bit model and evaluates it.
pub fn run_key_patch(cfg: &RunConfig) -> Result<(SegModel<f32>, TrainLog, EvalReport)> {
    cfg.validate()?;
    let task = KeyPatchTask::from_config(cfg);
    let train_set = task.generate(cfg.task.train_samples)?;
    let eval_set = task.generate_range(cfg.task.train_samples, cfg.task.eval_samples)?;
    let model = SegModel::new(&cfg.model, cfg.seed)?;
    let log = train(&model, &train_set, &cfg.train, cfg.seed, |_| {})?;
    let report = evaluate(&model, &eval_set, cfg.train.batch)?;
    Ok((model, log, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adam(wd: f64) -> Adam {
        Adam::new(&TrainConfig { weight_decay: wd, ..TrainConfig::default() })
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(6e-5, 1.0, 0, 100), 6e-5);
        assert_eq!(poly_lr(6e-5, 1.0, 100, 100), 0.0);
        assert!((poly_lr(6e-5, 1.0, 25, 100) - 4.5e-5).abs() < 1e-20);
        let mut prev = f64::INFINITY;
        for t in 0..=50 {
            let lr = poly_lr(1.0, 0.9, t, 50);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let p = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut opt = adam(0.0);
        opt.step(&[p.clone()], 0.1).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let p = Tensor::<f64>::param(&[2], vec![1.0, 1.0]).unwrap();
        p.sum().scale(3.0).backward().unwrap();
        let p2 = Tensor::<f64>::param(&[2], vec![1.0, 1.0]).unwrap();
        p2.sum().scale(-0.5).backward().unwrap();
        let mut opt = adam(0.0);
        opt.step(&[p.clone(), p2.clone()], 0.01).unwrap();
        // m̂ = g, v̂ = g², update = lr · g / (|g| + ε)
        let want = 1.0 - 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((p.to_vec()[0] - want).abs() < 1e-15);
        let want = 1.0 + 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p2.to_vec()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let p = Tensor::<f64>::param(&[1], vec![2.0]).unwrap();
        let mut opt = adam(0.01);
        opt.step(&[p.clone()], 0.1).unwrap();
        assert!((p.to_vec()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn csv_log_format() {
        let log = TrainLog { rows: vec![LogRow { step: 4, lr: 6e-5, loss: 1.5, miou: 0.25 }] };
        assert_eq!(log.to_csv(), "step,lr,loss,miou\n4,6e-5,1.50000000,0.250000\n");
    }
}
