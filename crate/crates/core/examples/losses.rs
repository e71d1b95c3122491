//! Dice, soft Dice and cross-entropy on small hand-checkable inputs.

use anyhow::Result;
use pseudo3d::losses::{
    combined_loss, combined_loss_with, cross_entropy_loss, hard_dice, soft_dice_loss, soft_dice_loss_with,
    ClassDistribution, DiceReduction, DICE_EPSILON,
};
use pseudo3d::tensor::Tensor;

/// One sample, `K` classes, positions laid out along the last axis.
fn dist(u: &[f64], v: &[f64], k: usize, eps: f64) -> Result<ClassDistribution> {
    let shape = vec![1, k, u.len() / k];
    Ok(ClassDistribution::new(
        Tensor::new(shape.clone(), u.to_vec())?,
        Tensor::new(shape, v.to_vec())?,
        eps,
    )?)
}

fn main() -> Result<()> {
    let a = [true, true, false, false];
    let b = [true, false, true, false];
    println!("hard dice of half-overlapping masks: {}", hard_dice(&a, &b)?);

    let truth = [1.0, 0.0, 0.0, 1.0];
    let perfect = dist(&truth, &truth, 2, DICE_EPSILON)?;
    println!("perfect prediction: soft dice {:.9}, cross-entropy {}", soft_dice_loss(&perfect)?, cross_entropy_loss(&perfect)?);
    let disjoint = dist(&[0.0, 1.0, 1.0, 0.0], &truth, 2, DICE_EPSILON)?;
    println!("disjoint prediction: soft dice {}", soft_dice_loss(&disjoint)?);

    // one pixel, two classes, uniform prediction
    let d = dist(&[0.5, 0.5], &[1.0, 0.0], 2, 0.0)?;
    println!("uniform pixel, class-mean dice {:.6}, pooled {:.6}", soft_dice_loss(&d)?, soft_dice_loss_with(&d, DiceReduction::Pooled)?);
    println!("uniform pixel, combined class-mean {:.6}, pooled {:.6}", combined_loss(&d)?, combined_loss_with(&d, DiceReduction::Pooled)?);

    let uniform = dist(&[0.25; 4], &[0.0, 0.0, 1.0, 0.0], 4, DICE_EPSILON)?;
    println!("uniform cross-entropy over 4 classes: {:.12} (ln 4 = {:.12})", cross_entropy_loss(&uniform)?, 4f64.ln());
    Ok(())
}
