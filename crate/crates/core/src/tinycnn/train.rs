use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{loss_bce, CnnModel, Gradients};
use crate::augment::{Label, TrainSample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 20,
            val_fraction: 0.2,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Parameter("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_run: u32,
    pub log: Vec<EpochLog>,
}

impl TrainMeta {
    pub fn last(&self) -> Option<&EpochLog> {
        self.log.last()
    }
}

/// CSV with header `epoch,train_loss,val_loss,val_acc`.
pub fn training_log_csv(meta: &TrainMeta) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_acc\n");
    for e in &meta.log {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.val_acc));
    }
    s
}

/// Adam with bias-corrected moments.
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Gradients<T>,
    v: Gradients<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &CnnModel<T>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: model.zero_gradients(),
            v: model.zero_gradients(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut CnnModel<T>, grads: &Gradients<T>) {
        self.t += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let one = T::one();
        let c1 = one - T::lit(self.cfg.beta1.powi(self.t));
        let c2 = one - T::lit(self.cfg.beta2.powi(self.t));
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        let update = |w: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        for (((layer, g), m), v) in model
            .layers
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}

/// Minibatch Adam training on binary cross-entropy.
///
/// A seeded shuffle splits off the validation set once; each epoch reshuffles
/// the training part. One dropout mask is drawn per minibatch. The returned
/// model carries the per-epoch log appended to `model.meta`.
pub fn train<T: Scalar>(
    model: &CnnModel<T>,
    samples: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<CnnModel<T>> {
    cfg.validate()?;
    let n_pos = samples.iter().filter(|s| s.label == Label::Vehicle).count();
    if n_pos == 0 || n_pos == samples.len() {
        return Err(Error::Training(format!(
            "training set needs both labels ({n_pos} vehicle of {} samples)",
            samples.len()
        )));
    }
    let mut out = model.clone();
    if cfg.epochs == 0 {
        return Ok(out);
    }

    let inputs: Vec<Vec<T>> = samples
        .par_iter()
        .map(|s| model.normalize(&s.patch))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n = samples.len();
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut adam = Adam::new(&out, cfg.adam);
    let first_epoch = out.meta.epochs_run;
    for e in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in train_idx.chunks(cfg.batch_size) {
            let mask = (out.plan.dropout > 0.0).then(|| out.sample_dropout_mask(&mut rng));
            let refs: Vec<(&[T], Label)> = batch
                .iter()
                .map(|&i| (inputs[i].as_slice(), samples[i].label))
                .collect();
            let (loss, grads) = out.backward_normalized(&refs, mask.as_deref());
            loss_sum += loss.as_f64() * batch.len() as f64;
            adam.step(&mut out, &grads);
        }
        let (val_loss, val_acc) = evaluate(&out, &inputs, samples, &val_idx);
        out.meta.log.push(EpochLog {
            epoch: first_epoch + e as u32 + 1,
            train_loss: loss_sum / train_idx.len() as f64,
            val_loss,
            val_acc,
        });
    }
    out.meta.epochs_run = first_epoch + cfg.epochs as u32;
    Ok(out)
}

fn evaluate<T: Scalar>(
    model: &CnnModel<T>,
    inputs: &[Vec<T>],
    samples: &[TrainSample],
    idx: &[usize],
) -> (f64, f64) {
    let scored: Vec<(f64, bool)> = idx
        .par_iter()
        .map(|&i| {
            let p = model.run(&inputs[i], None, None).prob;
            let label = samples[i].label;
            let correct = (p.as_f64() >= 0.5) == (label == Label::Vehicle);
            (loss_bce(p, label).as_f64(), correct)
        })
        .collect();
    let n = scored.len() as f64;
    let loss = scored.iter().map(|s| s.0).sum::<f64>() / n;
    let acc = scored.iter().filter(|s| s.1).count() as f64 / n;
    (loss, acc)
}
