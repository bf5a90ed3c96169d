//! AdamW with decoupled weight decay, cosine annealing, and the training
//! loop: shuffled mini-batches, weighted cross-entropy, per-epoch validation
//! mDice, and best-checkpoint selection.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Cx, EvalCx, Param, Tape};
use crate::data::{self, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, SegmentationMask};
use crate::model::{self, LmNet};
use crate::nn::Mode;
use crate::tensor::{Element, Tensor};

fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::InvalidArgument("lr and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Cosine annealing: `lr_t = 0.5 lr (1 + cos(pi t / total))`.
pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// AdamW: Adam moments plus decoupled weight decay. Parameters whose
/// `decay` flag is false (normalization affines, biases) skip the decay term.
/// Moments are kept in f64 regardless of the model element type.
pub struct AdamW {
    pub cfg: OptimConfig,
    state: HashMap<usize, (Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, state: HashMap::new(), t: 0 })
    }

    /// One update over `(param, gradient)` pairs at learning rate `lr`.
    pub fn step<T: Element>(&mut self, grads: &[(Param<T>, Tensor<T>)], lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (param, grad) in grads {
            let value = param.get();
            if grad.shape() != value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient shape {:?} for parameter {} of shape {:?}",
                    grad.shape(),
                    param.name(),
                    value.shape()
                )));
            }
            let n = value.numel();
            let (m, v) = self
                .state
                .entry(param.key())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let g = grad.data()[i].to_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut p = value.data()[i].to_f64();
                p -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                if param.decay() {
                    p -= lr * self.cfg.weight_decay * p;
                }
                next.push(T::from_f64(p));
            }
            param.set(Tensor::new(value.shape().to_vec(), next)?);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Square training resolution; must be divisible by 16.
    pub image_size: usize,
    pub seed: u64,
    /// Class-balance beta for the effective-number loss weights.
    pub class_balance_beta: f64,
    pub augment: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            image_size: 64,
            seed: 0,
            class_balance_beta: 0.9999,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub event: &'static str,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mean_dice: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_val_dice: f64,
    pub epochs_run: usize,
}

fn stack_batch<T: Element>(
    pairs: &[(Tensor<T>, SegmentationMask)],
) -> Result<(Tensor<T>, Vec<u32>)> {
    let parts: Vec<Tensor<T>> = pairs
        .iter()
        .map(|(img, _)| {
            let s = img.shape().to_vec();
            img.reshape(vec![1, s[0], s[1], s[2]])
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let x = Tensor::concat(&refs, 0)?;
    let mut labels = Vec::new();
    for (_, mask) in pairs {
        labels.extend_from_slice(&mask.labels);
    }
    Ok((x, labels))
}

/// Pixel counts per class over a split, at the training resolution.
pub fn split_pixel_counts<T: Element>(
    manifest: &DatasetManifest,
    split: Split,
    image_size: usize,
    num_classes: usize,
) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; num_classes];
    for entry in manifest.split(split) {
        let (_, mask) = data::load_pair::<T>(manifest, entry, Some((image_size, image_size)))?;
        mask.validate_classes(num_classes)?;
        for &l in &mask.labels {
            counts[l as usize] += 1;
        }
    }
    Ok(counts)
}

/// Mean metric report of a model over one manifest split (eval mode,
/// deterministic input order).
pub fn evaluate_split<T: Element>(
    model: &LmNet<T>,
    manifest: &DatasetManifest,
    split: Split,
    image_size: usize,
    foreground_only: bool,
) -> Result<MetricsReport> {
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::Data(format!("{:?} split is empty", split)));
    }
    let mut reports = Vec::with_capacity(entries.len());
    for entry in entries {
        let (img, mask) =
            data::load_pair::<T>(manifest, entry, Some((image_size, image_size)))?;
        let s = img.shape().to_vec();
        let x = img.reshape(vec![1, s[0], s[1], s[2]])?;
        let logits = model.forward(&EvalCx, &x, Mode::Eval)?;
        let pred = model::argmax_classes(&logits)?.remove(0);
        let pred = SegmentationMask::new(mask.h, mask.w, pred)?;
        reports.push(metrics::evaluate_pair(
            &pred,
            &mask,
            model.cfg.num_classes,
            foreground_only,
        )?);
    }
    metrics::mean_reports(&reports)
}

/// Train `model` in place. Saves the checkpoint whenever validation mDice
/// improves; with `epochs = 0` the untrained model is checkpointed as-is.
pub fn train_model<T: Element>(
    model: &LmNet<T>,
    manifest: &DatasetManifest,
    optim: OptimConfig,
    settings: &TrainSettings,
    checkpoint: &Path,
    mut on_log: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if settings.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if settings.image_size % 16 != 0 || settings.image_size == 0 {
        return Err(Error::InvalidArgument("image_size must be divisible by 16".into()));
    }
    let train_entries = manifest.split(Split::Train);
    if train_entries.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    if settings.epochs == 0 {
        model::save_weights(checkpoint, model)?;
        return Ok(TrainOutcome { best_val_dice: 0.0, epochs_run: 0 });
    }
    let num_classes = model.cfg.num_classes;
    let counts = split_pixel_counts::<T>(manifest, Split::Train, settings.image_size, num_classes)?;
    let weights = metrics::class_weights(&counts, settings.class_balance_beta)?;
    // classes absent from the training split get a tiny positive weight so
    // the loss stays defined if they appear later
    let weights =
        Tensor::from_f64_slice(vec![num_classes], &weights.iter().map(|&w| w.max(1e-8)).collect::<Vec<_>>())?;
    let mut opt = AdamW::new(optim)?;
    let mut best = f64::NEG_INFINITY;
    for epoch in 0..settings.epochs {
        let lr = cosine_lr(opt.cfg.lr, epoch, settings.epochs);
        let mut order: Vec<usize> = (0..train_entries.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(epoch as u64).wrapping_mul(0x2545f4914f6cdd1d));
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let mut pairs = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (img, mask) = data::load_pair::<T>(
                    manifest,
                    train_entries[idx],
                    Some((settings.image_size, settings.image_size)),
                )?;
                mask.validate_classes(num_classes)?;
                if settings.augment {
                    let mut rng = manifest.item_rng((epoch + 1) * train_entries.len() + idx);
                    pairs.push(data::augment(&img, &mask, &mut rng)?);
                } else {
                    pairs.push((img, mask));
                }
            }
            let (x, labels) = stack_batch(&pairs)?;
            let tape = Tape::<T>::new();
            let xv = tape.constant(x)?;
            let logits = model.forward(&tape, &xv, Mode::Train)?;
            let loss = tape.wce_loss(&logits, std::sync::Arc::new(labels), &weights)?;
            let loss_value = tape.value(loss).data()[0].to_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became {} at epoch {} batch {}",
                    loss_value, epoch, batches
                )));
            }
            let grads = tape.backward(loss)?;
            let bound = tape.bound_params();
            let mut updates = Vec::with_capacity(bound.len());
            for (param, var) in bound {
                if let Some(g) = grads.get(var) {
                    updates.push((param, g.clone()));
                }
            }
            opt.step(&updates, lr)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        let val = evaluate_split(model, manifest, Split::Val, settings.image_size, false)?;
        let improved = val.mean_dice > best;
        if improved {
            best = val.mean_dice;
            model::save_weights(checkpoint, model)?;
        }
        on_log(&EpochLog {
            event: "epoch",
            epoch,
            lr,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_mean_dice: val.mean_dice,
            improved,
        });
    }
    Ok(TrainOutcome { best_val_dice: best, epochs_run: settings.epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LmNetConfig;
    use std::sync::Arc;

    #[test]
    fn cosine_schedule_has_the_right_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 200), 1e-3);
        assert!(cosine_lr(1e-3, 200, 200).abs() < 1e-18);
        // halfway point is half the base rate
        assert!((cosine_lr(1e-3, 100, 200) - 5e-4).abs() < 1e-12);
        // monotone decreasing
        let vals: Vec<f64> = (0..=10).map(|t| cosine_lr(1.0, t, 10)).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let p = Param::new("p", Tensor::<f64>::scalar(5.0), true);
        let mut opt = AdamW::new(OptimConfig { lr: 0.1, ..OptimConfig::default() }).unwrap();
        for _ in 0..300 {
            let x = p.get().data()[0];
            let grad = Tensor::scalar(2.0 * (x - 3.0));
            opt.step(&[(p.clone(), grad)], 0.1).unwrap();
        }
        assert!((p.get().data()[0] - 3.0).abs() < 0.05);
    }

    #[test]
    fn weight_decay_respects_the_exemption_flag() {
        let decayed = Param::new("w", Tensor::<f64>::scalar(1.0), true);
        let exempt = Param::new("b", Tensor::<f64>::scalar(1.0), false);
        let mut opt = AdamW::new(OptimConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..OptimConfig::default()
        })
        .unwrap();
        let zero = Tensor::<f64>::scalar(0.0);
        for _ in 0..5 {
            opt.step(&[(decayed.clone(), zero.clone()), (exempt.clone(), zero.clone())], 0.1)
                .unwrap();
        }
        assert!(decayed.get().data()[0] < 1.0);
        assert_eq!(exempt.get().data()[0], 1.0);
    }

    #[test]
    fn adamw_rejects_bad_config_and_shapes() {
        assert!(AdamW::new(OptimConfig { lr: 0.0, ..OptimConfig::default() }).is_err());
        let p = Param::new("p", Tensor::<f64>::zeros(vec![2]).unwrap(), true);
        let mut opt = AdamW::new(OptimConfig::default()).unwrap();
        let bad = Tensor::<f64>::zeros(vec![3]).unwrap();
        assert!(opt.step(&[(p, bad)], 0.1).is_err());
    }

    fn tiny_cfg() -> LmNetConfig {
        LmNetConfig {
            base_channels: 4,
            expansion: 2,
            se_reduction: 2,
            num_classes: 2,
            in_channels: 3,
            window: 3,
            heads: 2,
            mlp_ratio: 2,
            depth: 1,
        }
    }

    #[test]
    fn loss_decreases_when_overfitting_one_image() {
        let model = LmNet::<f64>::new(tiny_cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 3 * 16 * 16;
        let x = Tensor::<f64>::new(
            vec![1, 3, 16, 16],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let labels: Arc<Vec<u32>> =
            Arc::new((0..256).map(|p| if p % 3 == 0 { 1 } else { 0 }).collect());
        let weights = Tensor::<f64>::ones(vec![2]).unwrap();
        let mut opt =
            AdamW::new(OptimConfig { lr: 1e-2, ..OptimConfig::default() }).unwrap();
        let mut losses = Vec::new();
        for _ in 0..8 {
            let tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone()).unwrap();
            let logits = model.forward(&tape, &xv, Mode::Train).unwrap();
            let loss = tape.wce_loss(&logits, labels.clone(), &weights).unwrap();
            losses.push(tape.value(loss).data()[0]);
            let grads = tape.backward(loss).unwrap();
            let updates: Vec<_> = tape
                .bound_params()
                .into_iter()
                .filter_map(|(p, v)| grads.get(v).map(|g| (p, g.clone())))
                .collect();
            opt.step(&updates, 1e-2).unwrap();
        }
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "loss did not decrease: {:?}",
            losses
        );
    }

    #[test]
    fn training_runs_are_deterministic_and_epoch0_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = data::synth_shapes(6, 16, 3, &dir.path().join("data")).unwrap();
        let settings = TrainSettings {
            epochs: 1,
            batch_size: 2,
            image_size: 16,
            seed: 4,
            class_balance_beta: 0.99,
            augment: true,
        };
        let run = |tag: &str| -> f64 {
            let model = LmNet::<f32>::new(tiny_cfg(), 5).unwrap();
            let mut first_loss = f64::NAN;
            train_model(
                &model,
                &manifest,
                OptimConfig::default(),
                &settings,
                &dir.path().join(format!("{tag}.lmw")),
                |log| first_loss = log.train_loss,
            )
            .unwrap();
            first_loss
        };
        let a = run("a");
        let b = run("b");
        assert_eq!(a, b);
        // epochs = 0 still writes a loadable checkpoint
        let model = LmNet::<f32>::new(tiny_cfg(), 5).unwrap();
        let path = dir.path().join("untrained.lmw");
        let out = train_model(
            &model,
            &manifest,
            OptimConfig::default(),
            &TrainSettings { epochs: 0, ..settings },
            &path,
            |_| {},
        )
        .unwrap();
        assert_eq!(out.epochs_run, 0);
        model::load_weights::<f32>(&path).unwrap();
    }
}
