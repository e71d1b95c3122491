//! Adam optimisation with validation-driven learning-rate drops and early
//! stopping, plus hard-Dice evaluation of trained models.

mod adam;
mod evaluate;
mod schedule;

pub use adam::{AdamConfig, AdamState};
pub use evaluate::{evaluate, evaluate_with, predict_volume, samples_for, tile_starts, EvalReport};
pub use schedule::{Callbacks, StopReason, Verdict};

use crate::data::{assemble_batch, augment, AugmentConfig, SliceStackSample};
use crate::error::{Error, Result};
use crate::losses::{argmax_classes, class_dice, loss_node, LossKind, DICE_EPSILON};
use crate::models::{Model, Phase, RunningStats};
use crate::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::rc::Rc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_drop_factor: f64,
    pub patience_epochs: usize,
    pub early_stop_epochs: usize,
    pub max_epochs: usize,
    pub l2_coefficient: f64,
    /// Defaults to 8 for slice models and 1 for volumetric ones.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Minimum decrease of the validation loss that counts as improvement.
    pub improvement_threshold: f64,
    pub loss: LossKind,
    pub dice_epsilon: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-4,
            lr_drop_factor: 0.2,
            patience_epochs: 5,
            early_stop_epochs: 11,
            max_epochs: 100,
            l2_coefficient: 1e-5,
            batch_size: None,
            seed: 0,
            improvement_threshold: 1e-5,
            loss: LossKind::Combined,
            dice_epsilon: DICE_EPSILON,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.initial_lr > 0.0 && self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return bad("learning rate must be positive and the drop factor in (0, 1)");
        }
        if self.patience_epochs == 0 || self.max_epochs == 0 || self.batch_size == Some(0) {
            return bad("patience, max epochs and batch size must be positive");
        }
        if self.early_stop_epochs < self.patience_epochs {
            return bad("early stop must be at least the patience");
        }
        if self.l2_coefficient < 0.0 || self.improvement_threshold < 0.0 || self.dice_epsilon < 0.0 {
            return bad("l2, improvement threshold and dice epsilon must be non-negative");
        }
        Ok(())
    }

    pub fn batch_size_for(&self, model: &Model) -> usize {
        self.batch_size
            .unwrap_or(if model.spec().mode.is_slicewise() { 8 } else { 1 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dsc: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation loss of the initial parameters.
    pub baseline_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch whose parameters were retained; 0 means the initial ones.
    pub best_epoch: usize,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_dsc,lr";

impl TrainHistory {
    /// One line per epoch after a header; floats use the shortest exact form.
    pub fn to_lines(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:?}", r.epoch, r.train_loss, r.val_loss, r.val_dsc, r.lr);
        }
        s
    }

    pub fn parse_lines(text: &str) -> Result<Vec<EpochRecord>> {
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(Error::Format("history file lacks its header".into()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let num = |i: usize| -> Result<f64> {
                    f.get(i)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Format(format!("bad history line `{l}`")))
                };
                if f.len() != 5 {
                    return Err(Error::Format(format!("bad history line `{l}`")));
                }
                Ok(EpochRecord {
                    epoch: num(0)? as usize,
                    train_loss: num(1)?,
                    val_loss: num(2)?,
                    val_dsc: num(3)?,
                    lr: num(4)?,
                })
            })
            .collect()
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.lr).collect()
    }
}

/// Supplies the validation loss and Dice the callbacks act on.
pub trait ValidationSource {
    /// `epoch` is 0 for the baseline before training.
    fn validate(&mut self, model: &Model, epoch: usize) -> Result<(f64, f64)>;
}

impl<F: FnMut(&Model, usize) -> Result<(f64, f64)>> ValidationSource for F {
    fn validate(&mut self, model: &Model, epoch: usize) -> Result<(f64, f64)> {
        self(model, epoch)
    }
}

/// Loss and mean foreground Dice of `model` on held-out samples.
pub struct SampleValidation<'a> {
    pub samples: &'a [SliceStackSample],
    pub config: &'a TrainConfig,
}

impl ValidationSource for SampleValidation<'_> {
    fn validate(&mut self, model: &Model, _epoch: usize) -> Result<(f64, f64)> {
        let r = score_samples(model, self.samples, self.config)?;
        Ok((r.loss, r.mean_foreground_dice))
    }
}

/// Loss and pooled hard Dice of a model over samples in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub loss: f64,
    pub class_dice: Vec<f64>,
    pub mean_foreground_dice: f64,
}

pub fn score_samples(model: &Model, samples: &[SliceStackSample], config: &TrainConfig) -> Result<SampleScore> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("no samples to score".into()));
    }
    let k = model.spec().num_classes;
    let bs = config.batch_size_for(model);
    let mut loss = 0.0;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for chunk in samples.chunks(bs) {
        let refs: Vec<&SliceStackSample> = chunk.iter().collect();
        let batch = assemble_batch(&refs, k)?;
        let mut g = Graph::new();
        let x = g.leaf(batch.input, false);
        let out = model.forward(&mut g, x, Phase::Infer, false)?;
        let l = loss_node(&mut g, out.probs, Rc::new(batch.target), config.loss, config.dice_epsilon)?;
        loss += g.value(l).data()[0] * chunk.len() as f64;
        pred.extend(argmax_classes(g.value(out.probs)));
        truth.extend(batch.labels);
    }
    let class_dice = (0..k as u8).map(|c| class_dice(&pred, &truth, c)).collect::<Result<Vec<_>>>()?;
    let mean_foreground_dice = class_dice[1..].iter().sum::<f64>() / (k - 1) as f64;
    Ok(SampleScore {
        loss: loss / samples.len() as f64,
        class_dice,
        mean_foreground_dice,
    })
}

/// Forward, backward and Adam update on one batch; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    input: Tensor,
    target: Tensor,
    lr: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(input, false);
    let out = model.forward(&mut g, x, Phase::Train, true)?;
    let loss = loss_node(&mut g, out.probs, Rc::new(target), config.loss, config.dice_epsilon)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let grad_list: Vec<Tensor> = out.param_vars.iter().map(|&v| grads.take(v)).collect();
    adam.step(model.params_mut(), &grad_list, lr)?;
    model.update_running_stats(&out.batch_stats);
    Ok(value)
}

/// Called after each epoch with the record and the current model; returning
/// `true` stops training.
pub type EpochObserver<'a> = dyn FnMut(&EpochRecord, &Model) -> bool + 'a;

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Trains `model` in place and restores the parameters with the best
/// validation loss (the initial ones if no epoch improved).
pub fn run_training(
    model: &mut Model,
    train: &[SliceStackSample],
    validation: &mut dyn ValidationSource,
    config: &TrainConfig,
    mut observer: Option<&mut EpochObserver<'_>>,
) -> Result<TrainHistory> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("training set is empty".into()));
    }
    let k = model.spec().num_classes;
    let bs = config.batch_size_for(model);
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            l2: config.l2_coefficient,
            ..AdamConfig::default()
        },
    );
    let (baseline, _) = validation.validate(model, 0)?;
    let mut callbacks = Callbacks::new(
        config.initial_lr,
        config.lr_drop_factor,
        config.patience_epochs,
        config.early_stop_epochs,
        config.improvement_threshold,
        baseline,
    );
    let mut best: (usize, crate::models::ParamStore, Vec<RunningStats>) =
        (0, model.params().clone(), model.running_stats().to_vec());
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=config.max_epochs {
        let lr = callbacks.lr;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 0)));
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let samples: Vec<SliceStackSample> = chunk
                .iter()
                .map(|&i| augment(&train[i], &config.augment, mix(config.seed, epoch as u64, i as u64 + 1)))
                .collect();
            let refs: Vec<&SliceStackSample> = samples.iter().collect();
            let batch = assemble_batch(&refs, k)?;
            total += train_step(model, &mut adam, batch.input, batch.target, lr, config)? * chunk.len() as f64;
        }
        let (val_loss, val_dsc) = validation.validate(model, epoch)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            val_dsc,
            lr,
        };
        epochs.push(record);
        let verdict = callbacks.observe(val_loss);
        if verdict == (Verdict::Continue { improved: true }) {
            best = (epoch, model.params().clone(), model.running_stats().to_vec());
        }
        if verdict == Verdict::Stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
        if let Some(obs) = observer.as_mut() {
            if obs(&record, model) {
                stop_reason = StopReason::Requested;
                break;
            }
        }
    }
    let (best_epoch, params, stats) = best;
    *model.params_mut() = params;
    model.set_running_stats(stats);
    Ok(TrainHistory {
        baseline_val_loss: baseline,
        epochs,
        stop_reason,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_stack, LabeledVolume};
    use crate::models::{BackboneKind, Mode, ModelSpec};

    fn tiny_volume() -> LabeledVolume {
        let (d, h, w) = (4, 8, 8);
        let labels: Vec<u8> = (0..d * h * w).map(|i| u8::from((i % w) >= 4)).collect();
        let image = labels.iter().map(|&l| l as f64 * 2.0 - 1.0).collect();
        LabeledVolume::new("t", 1, [d, h, w], [1.0; 3], 2, image, labels).unwrap()
    }

    fn setup() -> (Model, Vec<SliceStackSample>, TrainConfig) {
        let spec = ModelSpec::new(Mode::Proposed, BackboneKind::UNet, 3, 1, 2).with_base_filters(2);
        let v = tiny_volume();
        let samples = (0..4).map(|z| extract_stack(&v, z, 3).unwrap()).collect();
        let config = TrainConfig {
            max_epochs: 3,
            batch_size: Some(2),
            augment: AugmentConfig::disabled(),
            initial_lr: 1e-2,
            ..TrainConfig::default()
        };
        (Model::new(&spec, 4).unwrap(), samples, config)
    }

    #[test]
    fn history_roundtrips_through_lines() {
        let h = TrainHistory {
            baseline_val_loss: 1.0,
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.1 + 0.2,
                val_loss: -0.5,
                val_dsc: 1.0 / 3.0,
                lr: 2e-5,
            }],
            stop_reason: StopReason::MaxEpochs,
            best_epoch: 1,
        };
        let text = h.to_lines();
        assert!(text.starts_with("epoch,train_loss,val_loss,val_dsc,lr\n1,"));
        assert_eq!(TrainHistory::parse_lines(&text).unwrap(), h.epochs);
    }

    #[test]
    fn training_is_reproducible_and_keeps_best() {
        let (model, samples, config) = setup();
        let run = || {
            let mut m = model.clone();
            let mut val = SampleValidation {
                samples: &samples,
                config: &config,
            };
            let h = run_training(&mut m, &samples, &mut val, &config, None).unwrap();
            (h, m)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1.params().values(), m2.params().values());
        assert_eq!(h1.epochs.len(), 3);
        let best = if h1.best_epoch == 0 {
            h1.baseline_val_loss
        } else {
            h1.epochs[h1.best_epoch - 1].val_loss
        };
        assert!(h1.epochs.iter().all(|r| best <= r.val_loss));
        // retained parameters reproduce the best validation loss
        let again = score_samples(&m1, &samples, &config).unwrap().loss;
        assert_eq!(again, best);
    }

    #[test]
    fn frozen_validation_drives_schedule() {
        let (mut model, samples, mut config) = setup();
        config.max_epochs = 40;
        config.initial_lr = 1e-4;
        let mut frozen = |_: &Model, _: usize| Ok((0.7, 0.0));
        let h = run_training(&mut model, &samples, &mut frozen, &config, None).unwrap();
        assert_eq!(h.stop_reason, StopReason::EarlyStop);
        assert_eq!(h.epochs.len(), 11);
        assert_eq!(h.best_epoch, 0);
    }

    #[test]
    fn observer_can_stop() {
        let (mut model, samples, config) = setup();
        let mut val = SampleValidation {
            samples: &samples,
            config: &config,
        };
        let mut obs = |r: &EpochRecord, _: &Model| r.epoch == 2;
        let h = run_training(&mut model, &samples, &mut val, &config, Some(&mut obs)).unwrap();
        assert_eq!(h.stop_reason, StopReason::Requested);
        assert_eq!(h.epochs.len(), 2);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let (mut model, samples, config) = setup();
        let mut val = SampleValidation {
            samples: &samples,
            config: &config,
        };
        assert!(run_training(&mut model, &[], &mut val, &config, None).is_err());
    }
}
