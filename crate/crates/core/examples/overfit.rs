//! Trains a proposed-mode U-Net on four phantoms until it fits them.
//!
//! Usage: `overfit [learning-rate]` (default 1e-4).

use anyhow::Result;
use pseudo3d::data::{generate_set, AugmentConfig, LabeledVolume, PhantomPreset, PhantomSpec};
use pseudo3d::models::{BackboneKind, Mode, Model, ModelSpec};
use pseudo3d::training::{evaluate, run_training, samples_for, score_samples, EpochRecord, TrainConfig};
use std::time::Instant;

fn main() -> Result<()> {
    let lr: f64 = match std::env::args().nth(1) {
        Some(s) => s.parse()?,
        None => 1e-4,
    };
    let spec = PhantomSpec::preset(PhantomPreset::Kidney, [16, 32, 32], 0);
    let volumes: Vec<LabeledVolume> = generate_set(&spec, 4)?.into_iter().map(|(v, _)| v).collect();
    let model_spec = ModelSpec::new(Mode::Proposed, BackboneKind::UNet, 3, 1, 3);
    let mut model = Model::new(&model_spec, 0)?;
    let mut samples = Vec::new();
    for v in &volumes {
        samples.extend(samples_for(&model_spec, v)?);
    }
    let config = TrainConfig {
        initial_lr: lr,
        max_epochs: 200,
        augment: AugmentConfig::disabled(),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut on_train = |m: &Model, _: usize| {
        let s = score_samples(m, &samples, &config)?;
        Ok((s.loss, s.mean_foreground_dice))
    };
    let mut report = |r: &EpochRecord, m: &Model| {
        let dsc = evaluate(m, &volumes, 16).map_or(0.0, |e| e.mean_foreground);
        println!(
            "epoch {:>3}  train loss {:+.4}  lr {:e}  volume dsc {dsc:.4}  {:.0}s",
            r.epoch,
            r.train_loss,
            r.lr,
            start.elapsed().as_secs_f64()
        );
        dsc > 0.95
    };
    let samples_for_training = samples.clone();
    let history = run_training(&mut model, &samples_for_training, &mut on_train, &config, Some(&mut report))?;
    println!("stopped: {:?}, best epoch {}", history.stop_reason, history.best_epoch);
    Ok(())
}
