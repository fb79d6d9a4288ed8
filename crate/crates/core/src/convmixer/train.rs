use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adaptive::{loss_total, penalty_lu};
use super::model::{Model, TrainScope};
use crate::dataset::{Batch, Dataset};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::{NormMode, Tape, Tensor};

/// Adaptive-moment optimizer settings with cosine learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the rate decays to zero; 0 keeps it constant.
    pub total_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, total_steps: 0 }
    }
}

/// Moment estimates for every model parameter, in [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: usize,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, model: &Model<T>) -> Self {
        let zeros: Vec<Vec<T>> = model.params().iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used by the next step.
    pub fn current_lr(&self) -> f64 {
        let c = &self.cfg;
        if c.total_steps == 0 {
            return c.lr;
        }
        let frac = self.step.min(c.total_steps) as f64 / c.total_steps as f64;
        c.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Applies one update; parameters whose gradient is `None` are left alone.
    pub fn update(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(invalid("optimizer state does not match the model's parameters"));
        }
        let lr = T::from_f64_lossy(self.current_lr());
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::from_f64_lossy(1.0 - b1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - b2.powi(t));
        let (b1, b2, eps) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2), T::from_f64_lossy(self.cfg.eps));
        let one = T::one();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome<T> {
    pub loss: T,
    /// Penalty value when the model carries an adaptive matrix.
    pub penalty: Option<T>,
    pub correct: usize,
    pub count: usize,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits.data().chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// Forward, loss, backward and one optimizer update on `batch`.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &Batch<T>,
    opt: &mut Adam<T>,
    scope: TrainScope,
    mode: NormMode,
) -> Result<StepOutcome<T>> {
    if batch.labels.is_empty() {
        return Err(invalid("empty batch"));
    }
    let lambda = T::from_f64_lossy(model.config().lambda);
    let mut tape = Tape::new();
    let x = tape.leaf(batch.images.clone());
    let fwd = model.forward(&mut tape, x, mode, scope)?;
    let loss = loss_total(&mut tape, fwd.logits, &batch.labels, fwd.adaptive, lambda)?;
    let mut grads = tape.backward(loss)?;
    let param_grads: Vec<Option<Vec<T>>> = fwd.params.iter().map(|&p| grads.take(p)).collect();
    let penalty = match fwd.adaptive {
        Some(u) => Some(penalty_lu(tape.value(u))?),
        None => None,
    };
    let correct = count_correct(tape.value(fwd.logits), &batch.labels);
    let loss = tape.value(loss).item();
    drop(tape);
    opt.update(model.params_mut(), &param_grads)?;
    Ok(StepOutcome { loss, penalty, correct, count: batch.labels.len() })
}

/// Top-1 accuracy with normalization in eval mode.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, data: &Dataset<T>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0;
    for batch in data.batches(batch_size) {
        let logits = model.logits(&batch.images, NormMode::Eval)?;
        correct += count_correct(&logits, &batch.labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub scope: TrainScope,
    pub norm_mode: NormMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 64, lr: 1e-3, seed: 0, scope: TrainScope::All, norm_mode: NormMode::Train }
    }
}

/// Per-epoch metrics; one CSV row each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub penalty_lu: Option<f64>,
}

pub fn metrics_csv_header() -> &'static str {
    "epoch,train_loss,train_acc,test_acc,penalty_LU"
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            opt(self.test_acc),
            opt(self.penalty_lu)
        )
    }
}

/// Mini-batch training with a per-epoch shuffle drawn from `cfg.seed`.
///
/// `on_epoch` sees each epoch's metrics as soon as they are computed.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(bs);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, total_steps: cfg.epochs * steps_per_epoch, ..Default::default() }, model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let single_token = model.config().n_tokens() == 1;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for chunk in order.chunks(bs) {
            if chunk.len() == 1 && single_token && cfg.norm_mode == NormMode::Train {
                continue;
            }
            let out = train_step(model, &train.batch(chunk), &mut opt, cfg.scope, cfg.norm_mode)?;
            loss_sum += out.loss.to_f64_lossy() * out.count as f64;
            correct += out.correct;
            seen += out.count;
        }
        let test_acc = match test {
            Some(t) if !t.is_empty() => Some(evaluate(model, t, bs)?),
            _ => None,
        };
        let penalty = match &model.adaptive {
            Some(u) => Some(penalty_lu(u)?.to_f64_lossy()),
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc,
            penalty_lu: penalty,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}
