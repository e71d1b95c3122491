//! Overlap metric and training losses.
//!
//! The soft Dice term used for training is computed per class over the whole
//! batch and then averaged over classes, background included. A pooled
//! reduction, summing every (class, position) product into one ratio, is
//! available for comparison. Cross-entropy weights the log-probabilities by
//! the ground truth, `-Σ v log u`.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Default additive constant in the soft Dice denominator.
pub const DICE_EPSILON: f64 = 1e-7;

/// Predicted probabilities `u` and one-hot truth `v`, both `[N, K, ...]`.
#[derive(Clone, Debug)]
pub struct ClassDistribution {
    pub u: Tensor,
    pub v: Tensor,
    pub epsilon: f64,
}

impl ClassDistribution {
    /// Validates that `u` sums to one per position and `v` is exactly one-hot.
    pub fn new(u: Tensor, v: Tensor, epsilon: f64) -> Result<Self> {
        if u.shape() != v.shape() || u.shape().len() < 2 {
            return Err(Error::Shape(format!(
                "prediction {:?} and target {:?} must share an [N, K, ...] shape",
                u.shape(),
                v.shape()
            )));
        }
        let s = u.shape();
        let (n, k, plane) = (s[0], s[1], s[2..].iter().product::<usize>());
        for b in 0..n {
            for p in 0..plane {
                let at = |t: &Tensor, c: usize| t.data()[(b * k + c) * plane + p];
                let total: f64 = (0..k).map(|c| at(&u, c)).sum();
                if (total - 1.0).abs() > 1e-9 || (0..k).any(|c| !(0.0..=1.0).contains(&at(&u, c))) {
                    return Err(Error::InvalidArgument(format!(
                        "prediction at sample {b}, position {p} is not a distribution"
                    )));
                }
                let ones = (0..k).filter(|&c| at(&v, c) == 1.0).count();
                let zeros = (0..k).filter(|&c| at(&v, c) == 0.0).count();
                if ones != 1 || zeros != k - 1 {
                    return Err(Error::InvalidArgument(format!(
                        "target at sample {b}, position {p} is not one-hot"
                    )));
                }
            }
        }
        Ok(Self { u, v, epsilon })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Soft Dice plus cross-entropy.
    #[default]
    Combined,
    DiceOnly,
}

/// How the soft Dice ratio is reduced over classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceReduction {
    /// One ratio per class over all positions, then the mean over classes.
    #[default]
    ClassMean,
    /// A single ratio over every class and position.
    Pooled,
}

/// `2|U ∩ V| / (|U| + |V|)`; two empty masks score 1.
pub fn hard_dice(u: &[bool], v: &[bool]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "masks of {} and {} elements",
            u.len(),
            v.len()
        )));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in u.iter().zip(v) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Hard Dice of class `class` between two label maps.
pub fn class_dice(pred: &[u8], truth: &[u8], class: u8) -> Result<f64> {
    let u: Vec<bool> = pred.iter().map(|&l| l == class).collect();
    let v: Vec<bool> = truth.iter().map(|&l| l == class).collect();
    hard_dice(&u, &v)
}

pub fn soft_dice_loss(dist: &ClassDistribution) -> Result<f64> {
    soft_dice_loss_with(dist, DiceReduction::ClassMean)
}

pub fn soft_dice_loss_with(dist: &ClassDistribution, reduction: DiceReduction) -> Result<f64> {
    match reduction {
        DiceReduction::ClassMean => kernels::soft_dice_forward(&dist.u, &dist.v, dist.epsilon),
        DiceReduction::Pooled => {
            let (mut inter, mut total) = (0.0, 0.0);
            for (&u, &v) in dist.u.data().iter().zip(dist.v.data()) {
                inter += u * v;
                total += u + v;
            }
            Ok(-2.0 * inter / (total + dist.epsilon))
        }
    }
}

pub fn cross_entropy_loss(dist: &ClassDistribution) -> Result<f64> {
    kernels::cross_entropy_forward(&dist.u, &dist.v)
}

pub fn combined_loss(dist: &ClassDistribution) -> Result<f64> {
    combined_loss_with(dist, DiceReduction::ClassMean)
}

pub fn combined_loss_with(dist: &ClassDistribution, reduction: DiceReduction) -> Result<f64> {
    Ok(soft_dice_loss_with(dist, reduction)? + cross_entropy_loss(dist)?)
}

/// Adds the chosen loss of `probs` against `target` to the graph.
pub fn loss_node(graph: &mut Graph, probs: Var, target: Rc<Tensor>, kind: LossKind, epsilon: f64) -> Result<Var> {
    let dice = graph.soft_dice_loss(probs, Rc::clone(&target), epsilon)?;
    match kind {
        LossKind::DiceOnly => Ok(dice),
        LossKind::Combined => {
            let ce = graph.cross_entropy(probs, target)?;
            graph.add(dice, ce)
        }
    }
}

/// One-hot encodes `labels` laid out as `[N, positions...]` into
/// `[N, K, positions...]` with the given trailing spatial shape.
pub fn one_hot(labels: &[u8], classes: usize, batch: usize, spatial: &[usize]) -> Result<Tensor> {
    let plane: usize = spatial.iter().product();
    if labels.len() != batch * plane {
        return Err(Error::Shape(format!(
            "{} labels for batch {batch} × {plane} positions",
            labels.len()
        )));
    }
    let mut data = vec![0.0; batch * classes * plane];
    for (i, &l) in labels.iter().enumerate() {
        let (b, p) = (i / plane, i % plane);
        let l = l as usize;
        if l >= classes {
            return Err(Error::InvalidArgument(format!("label {l} >= {classes} classes")));
        }
        data[(b * classes + l) * plane + p] = 1.0;
    }
    let mut shape = vec![batch, classes];
    shape.extend_from_slice(spatial);
    Tensor::new(shape, data)
}

/// Per-position argmax over axis 1 of `[N, K, ...]`; ties go to the lower class.
pub fn argmax_classes(probs: &Tensor) -> Vec<u8> {
    let s = probs.shape();
    let (n, k, plane) = (s[0], s[1], s[2..].iter().product::<usize>());
    let u = probs.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if u[(b * k + c) * plane + p] > u[(b * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
