//! CT normalisation, spacing standardisation, slice stacks and augmentation.

use anyhow::Result;
use pseudo3d::data::{
    augment, extract_stack, generate_phantom, normalize_ct, standardize_volume, AugmentConfig, PhantomPreset,
    PhantomSpec,
};

fn main() -> Result<()> {
    println!("ct window: {:?}", normalize_ct(&[-3000.0, -1000.0, 500.0, 2000.0, 4000.0]));

    let mut spec = PhantomSpec::preset(PhantomPreset::Kidney, [20, 40, 40], 5);
    spec.spacing = [2.5, 0.8, 0.8];
    let (volume, _) = generate_phantom(&spec)?;
    let standard = standardize_volume(&volume, [1.0, 1.0, 1.0], [64, 48, 48], [32, 32, 32])?;
    println!(
        "standardised {:?} at spacing {:?} to {:?} at spacing {:?}",
        volume.dims, volume.spacing, standard.dims, standard.spacing
    );

    let mid = standard.dims[0] / 2;
    let stack = extract_stack(&standard, mid, 5)?;
    println!(
        "stack around slice {mid}: input {:?} x {} channel(s), target slice {}",
        stack.input_dims, stack.channels, stack.center_index
    );
    let cfg = AugmentConfig {
        probability: 1.0,
        ..AugmentConfig::default()
    };
    let warped = augment(&stack, &cfg, 42);
    let changed = warped.target.iter().zip(&stack.target).filter(|(a, b)| a != b).count();
    let foreground = stack.target.iter().filter(|&&l| l > 0).count();
    println!(
        "augmentation relabelled {changed} of {} target pixels ({foreground} foreground before)",
        stack.target.len()
    );
    let same = augment(&stack, &AugmentConfig::disabled(), 42);
    println!("disabled augmentation is the identity: {}", same == stack);
    Ok(())
}
