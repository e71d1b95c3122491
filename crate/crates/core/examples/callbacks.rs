//! Learning-rate drops and early stopping against a validation loss that
//! never improves.

use anyhow::Result;
use pseudo3d::data::{extract_stack, generate_phantom, AugmentConfig, PhantomPreset, PhantomSpec};
use pseudo3d::models::{BackboneKind, Mode, Model, ModelSpec};
use pseudo3d::training::{run_training, TrainConfig};

fn main() -> Result<()> {
    let (volume, _) = generate_phantom(&PhantomSpec::preset(PhantomPreset::Prostate, [8, 16, 16], 0))?;
    let samples = (0..4).map(|z| extract_stack(&volume, z, 3)).collect::<pseudo3d::Result<Vec<_>>>()?;
    let spec = ModelSpec::new(Mode::Proposed, BackboneKind::UNet, 3, 1, 2).with_base_filters(2);
    let mut model = Model::new(&spec, 0)?;
    let config = TrainConfig {
        max_epochs: 100,
        augment: AugmentConfig::disabled(),
        ..TrainConfig::default()
    };
    let mut frozen = |_: &Model, _: usize| Ok((0.5, 0.0));
    let history = run_training(&mut model, &samples, &mut frozen, &config, None)?;
    for r in &history.epochs {
        println!("epoch {:>2}: lr {:e}", r.epoch, r.lr);
    }
    println!("stopped: {:?} after {} epochs", history.stop_reason, history.epochs.len());
    Ok(())
}
