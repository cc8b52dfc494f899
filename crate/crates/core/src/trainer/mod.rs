//! Supervised training, masked fine-tuning and evaluation.

mod data;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{Dataset, SynthDataset, SYNTH_CHANNELS, SYNTH_SIDE};

use crate::autodiff::{kernels, Tape};
use crate::elastic::FreezeMask;
use crate::error::{Error, Result};
use crate::graph::{Mode, ModelGraph, ParamKey};
use crate::parallel;
use crate::tensor::{Scalar, Tensor};

/// Mean cross-entropy of `logits` `[N, C]`, computed with max subtraction.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            s
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {} classes",
            bad, s[1]
        )));
    }
    Ok(kernels::cross_entropy_forward(logits.data(), labels, s[1]).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Held-out fraction of the training data.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-3,
            lr_min: 1e-5,
            epochs: 20,
            batch_size: 32,
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            patience: 5,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_min > 0.0
            && self.lr_max >= self.lr_min
            && self.epochs >= 1
            && self.batch_size >= 1
            && self.patience >= 1
            && (0.0..1.0).contains(&self.val_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "inconsistent training config {:?}",
                self
            )))
        }
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t/T))`.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> f64 {
    let frac = t.min(cfg.epochs) as f64 / cfg.epochs.max(1) as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl History {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn epochs_run(&self) -> usize {
        self.records.iter().map(|r| r.epoch + 1).max().unwrap_or(0)
    }

    pub fn last(&self, split: Split) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

struct OptState<T> {
    m: BTreeMap<ParamKey, Vec<T>>,
    v: BTreeMap<ParamKey, Vec<T>>,
    step: i32,
}

impl<T: Scalar> OptState<T> {
    fn new<U: Scalar>(model: &ModelGraph<U>) -> Self {
        let zeros = |t: &Tensor<U>| vec![T::zero(); t.numel()];
        let trainable = || model.params().filter(|(k, _)| !k.role.is_buffer());
        OptState {
            m: trainable().map(|(k, t)| (*k, zeros(t))).collect(),
            v: trainable().map(|(k, t)| (*k, zeros(t))).collect(),
            step: 0,
        }
    }

    /// One update. Frozen coordinates keep their value and their moments.
    fn apply(
        &mut self,
        model: &mut ModelGraph<T>,
        grads: &BTreeMap<ParamKey, Tensor<T>>,
        mask: Option<&FreezeMask>,
        opt: Optimizer,
        lr: f64,
    ) {
        self.step += 1;
        let lr_t = T::from_f64(lr);
        for (key, g) in grads {
            let frozen = mask.and_then(|m| m.params.get(key));
            let w = model.param_mut(*key).expect("gradient for a registry tensor");
            let m = self.m.get_mut(key).expect("state for every parameter");
            let v = self.v.get_mut(key).expect("state for every parameter");
            for i in 0..g.numel() {
                if frozen.is_some_and(|f| f[i]) {
                    continue;
                }
                let gi = g.data()[i];
                let wi = &mut w.data_mut()[i];
                match opt {
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                        m[i] = b1 * m[i] + (T::one() - b1) * gi;
                        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                        let mhat = m[i] / T::from_f64(1.0 - beta1.powi(self.step));
                        let vhat = v[i] / T::from_f64(1.0 - beta2.powi(self.step));
                        *wi -= lr_t * mhat / (vhat.sqrt() + T::from_f64(eps));
                    }
                    Optimizer::Sgd { momentum } => {
                        m[i] = T::from_f64(momentum) * m[i] + gi;
                        *wi -= lr_t * m[i];
                    }
                }
            }
        }
    }
}

/// Trains `model` on an 80/20 (by default) split of `data`. With a mask,
/// frozen coordinates receive no update, and frozen batchnorm channels keep
/// their running statistics and normalize with them during training as well.
pub fn fit<T: Scalar>(
    model: &mut ModelGraph<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mask: Option<&FreezeMask>,
) -> Result<History> {
    cfg.validate()?;
    let (train, val) = data.split(cfg.val_fraction, cfg.seed);
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "no training samples after the validation split".into(),
        ));
    }
    let mut state = OptState::<T>::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut history = History::default();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.gather(chunk);
            let mut tape = Tape::new();
            let trace = model.record_with(&mut tape, &x, Mode::Train, mask.map(|m| &m.bn_channels))?;
            let loss = tape.cross_entropy(trace.logits, &y)?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, loss: value });
            }
            loss_sum += value * chunk.len() as f64;
            correct += count_correct(tape.value(trace.logits), &y);
            let mut grads = tape.backward(loss)?;
            let grads: BTreeMap<ParamKey, Tensor<T>> = trace
                .params
                .iter()
                .map(|(k, v)| (*k, grads.remove(v).expect("param gradient")))
                .collect();
            if grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, loss: f64::NAN });
            }
            state.apply(model, &grads, mask, cfg.optimizer, lr);
            model.update_running_stats(&tape, &trace, mask.map(|m| &m.bn_channels));
        }
        history.records.push(EpochRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
            lr,
        });
        if val.is_empty() {
            continue;
        }
        let (vloss, vacc) = evaluate_loss(model, &val)?;
        history.records.push(EpochRecord {
            epoch,
            split: Split::Val,
            loss: vloss,
            accuracy: vacc,
            lr,
        });
        if vloss < best {
            best = vloss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok(history)
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 128;

/// Mean loss and accuracy in eval mode. Chunks are evaluated in parallel.
pub fn evaluate_loss<T: Scalar>(model: &ModelGraph<T>, data: &Dataset<T>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let chunks = data.len().div_ceil(EVAL_CHUNK);
    let parts = parallel::map_indices(chunks, |c| -> Result<(f64, usize)> {
        let idx: Vec<usize> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(data.len())).collect();
        let (x, y) = data.gather(&idx);
        let logits = model.predict(&x)?;
        let loss = cross_entropy(&logits, &y)?.as_f64() * y.len() as f64;
        Ok((loss, count_correct(&logits, &y)))
    });
    let (mut loss, mut correct) = (0.0, 0);
    for p in parts {
        let (l, c) = p?;
        loss += l;
        correct += c;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate<T: Scalar>(model: &ModelGraph<T>, data: &Dataset<T>) -> Result<f64> {
    Ok(evaluate_loss(model, data)?.1)
}
