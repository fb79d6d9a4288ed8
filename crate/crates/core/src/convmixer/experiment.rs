//! Experiment drivers shared by the acceptance suite and the command line.

use std::sync::Mutex;
use std::thread;

use super::adaptive::extract_permutation;
use super::model::{Model, TrainScope};
use super::train::{evaluate, fit, EpochMetrics, TrainConfig};
use super::ModelConfig;
use crate::blockcipher::{CipherParams, Stages};
use crate::dataset::{Dataset, LabeledImages};
use crate::error::{invalid, Result};
use crate::keystream::SecretKey;
use crate::tensor::NormMode;

/// Plain pre-training followed by fitting only `U` on block-permuted data.
#[derive(Debug, Clone)]
pub struct RecoverySetup {
    /// Backbone architecture; `use_adaptive_matrix` is ignored.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    /// Scope and normalization mode are forced to adaptive-only / eval.
    pub adapt: TrainConfig,
    pub key: SecretKey,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub plain_acc: f64,
    /// Frozen model on encrypted data with `U = I + noise`, before fitting `U`.
    pub encrypted_before: f64,
    pub encrypted_after: f64,
    /// Fraction of rows whose argmax matches the cipher's block map.
    pub agreement: f64,
    pub valid: bool,
    pub pretrain_history: Vec<EpochMetrics>,
    pub adapt_history: Vec<EpochMetrics>,
}

pub fn permutation_recovery(
    train: &LabeledImages,
    test: &LabeledImages,
    setup: &RecoverySetup,
    mut on_epoch: impl FnMut(&str, &EpochMetrics),
) -> Result<RecoveryReport> {
    let mut cfg = setup.model;
    cfg.use_adaptive_matrix = false;
    let mut model = Model::<f64>::build(&cfg, setup.seed)?;
    let (plain_train, plain_test) = (Dataset::from_images(train)?, Dataset::from_images(test)?);
    let pre = TrainConfig { scope: TrainScope::All, norm_mode: NormMode::Train, ..setup.pretrain };
    let pretrain_history = fit(&mut model, &plain_train, Some(&plain_test), &pre, |m| on_epoch("pretrain", m))?;
    let plain_acc = evaluate(&mut model, &plain_test, pre.batch_size)?;

    let cipher = CipherParams::new(cfg.patch, setup.key).with_stages(Stages::PERMUTATION_ONLY);
    let enc_train = Dataset::from_images(&train.encrypted(&cipher)?)?;
    let enc_test = Dataset::from_images(&test.encrypted(&cipher)?)?;
    model.attach_adaptive_matrix(setup.seed.wrapping_add(1));
    let encrypted_before = evaluate(&mut model, &enc_test, pre.batch_size)?;

    let adapt = TrainConfig { scope: TrainScope::AdaptiveOnly, norm_mode: NormMode::Eval, ..setup.adapt };
    let adapt_history = fit(&mut model, &enc_train, Some(&enc_test), &adapt, |m| on_epoch("adapt", m))?;
    let encrypted_after = evaluate(&mut model, &enc_test, adapt.batch_size)?;

    let u = model.adaptive.as_ref().ok_or_else(|| invalid("adaptive matrix missing after training"))?;
    let extraction = extract_permutation(u)?;
    let expected = cipher.block_permutation(cfg.n_tokens())?;
    Ok(RecoveryReport {
        plain_acc,
        encrypted_before,
        encrypted_after,
        agreement: extraction.agreement(expected.as_slice()),
        valid: extraction.valid,
        pretrain_history,
        adapt_history,
    })
}

/// Test accuracies of the three arms for one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendRun {
    pub seed: u64,
    pub plain: f64,
    pub encrypted_with_u: f64,
    pub encrypted_without_u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendReport {
    pub runs: Vec<TrendRun>,
}

impl TrendReport {
    fn mean(&self, f: impl Fn(&TrendRun) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_plain(&self) -> f64 {
        self.mean(|r| r.plain)
    }

    pub fn mean_with_u(&self) -> f64 {
        self.mean(|r| r.encrypted_with_u)
    }

    pub fn mean_without_u(&self) -> f64 {
        self.mean(|r| r.encrypted_without_u)
    }
}

/// Trains plain, encrypted-with-`U` and encrypted-without-`U` models for each
/// seed. The key for seed `s` is `key_for(s)`; every cipher stage is on.
/// All runs are independent and execute on their own threads.
pub fn accuracy_trend(
    train: &LabeledImages,
    test: &LabeledImages,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    key_for: impl Fn(u64) -> SecretKey,
    on_epoch: impl FnMut(u64, &str, &EpochMetrics) + Send,
) -> Result<TrendReport> {
    let plain_train = Dataset::<f64>::from_images(train)?;
    let plain_test = Dataset::<f64>::from_images(test)?;
    let mut encrypted = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cipher = CipherParams::new(model.patch, key_for(seed));
        encrypted.push((
            Dataset::<f64>::from_images(&train.encrypted(&cipher)?)?,
            Dataset::<f64>::from_images(&test.encrypted(&cipher)?)?,
        ));
    }
    let on_epoch = Mutex::new(on_epoch);
    let arm = |seed: u64, with_u: bool, tr: &Dataset<f64>, te: &Dataset<f64>, name: &str| -> Result<f64> {
        let tc = TrainConfig { seed, scope: TrainScope::All, norm_mode: NormMode::Train, ..*train_cfg };
        let cfg = ModelConfig { use_adaptive_matrix: with_u, ..*model };
        let mut m = Model::<f64>::build(&cfg, seed)?;
        fit(&mut m, tr, Some(te), &tc, |e| {
            if let Ok(mut f) = on_epoch.lock() {
                f(seed, name, e)
            }
        })?;
        evaluate(&mut m, te, tc.batch_size)
    };
    let results: Vec<Result<[f64; 3]>> = thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .zip(&encrypted)
            .map(|(&seed, (enc_train, enc_test))| {
                let arm = &arm;
                let (pt, pe) = (&plain_train, &plain_test);
                let plain = scope.spawn(move || arm(seed, false, pt, pe, "plain"));
                let with_u = scope.spawn(move || arm(seed, true, enc_train, enc_test, "encrypted_with_u"));
                let without_u = scope.spawn(move || arm(seed, false, enc_train, enc_test, "encrypted_without_u"));
                [plain, with_u, without_u]
            })
            .collect();
        handles
            .into_iter()
            .map(|hs| {
                let mut out = [0.0; 3];
                for (slot, h) in out.iter_mut().zip(hs) {
                    *slot = h.join().map_err(|_| invalid("training thread panicked"))??;
                }
                Ok(out)
            })
            .collect()
    });
    let mut runs = Vec::with_capacity(seeds.len());
    for (&seed, r) in seeds.iter().zip(results) {
        let [plain, encrypted_with_u, encrypted_without_u] = r?;
        runs.push(TrendRun { seed, plain, encrypted_with_u, encrypted_without_u });
    }
    Ok(TrendReport { runs })
}
