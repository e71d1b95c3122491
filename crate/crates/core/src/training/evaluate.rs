//! Whole-volume prediction and per-class hard Dice.

use crate::data::{assemble_batch, extract_patch, extract_stack, LabeledVolume, SliceStackSample};
use crate::error::{Error, Result};
use crate::losses::{argmax_classes, class_dice};
use crate::models::{Model, ModelSpec, Phase};
use crate::tensor::Graph;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Non-overlapping tiles of `depth` slices; the last is right-aligned.
pub fn tile_starts(total: usize, depth: usize) -> Result<Vec<usize>> {
    if depth == 0 || depth > total {
        return Err(Error::Extent(format!("tile depth {depth} does not fit {total} slices")));
    }
    let mut starts: Vec<usize> = (0..total / depth).map(|i| i * depth).collect();
    if !total.is_multiple_of(depth) {
        starts.push(total - depth);
    }
    Ok(starts)
}

/// One slice stack per slice, or one patch per depth tile for volumetric models.
pub fn samples_for(spec: &ModelSpec, volume: &LabeledVolume) -> Result<Vec<SliceStackSample>> {
    if spec.mode.is_slicewise() {
        (0..volume.dims[0]).map(|z| extract_stack(volume, z, spec.depth)).collect()
    } else {
        tile_starts(volume.dims[0], spec.depth)?
            .into_iter()
            .map(|s| extract_patch(volume, s, spec.depth))
            .collect()
    }
}

/// Label map `[D, H, W]` predicted slice by slice or tile by tile.
pub fn predict_volume(model: &Model, volume: &LabeledVolume, batch_size: usize) -> Result<Vec<u8>> {
    let samples = samples_for(model.spec(), volume)?;
    let s = volume.slice_len();
    let mut out = vec![0u8; volume.voxels()];
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceStackSample> = chunk.iter().collect();
        let batch = assemble_batch(&refs, model.spec().num_classes)?;
        let mut g = Graph::new();
        let x = g.leaf(batch.input, false);
        let probs = model.forward(&mut g, x, Phase::Infer, false)?.probs;
        let labels = argmax_classes(g.value(probs));
        let per_sample = labels.len() / chunk.len();
        for (sample, pred) in chunk.iter().zip(labels.chunks(per_sample)) {
            let start = sample.center_index * s;
            out[start..start + pred.len()].copy_from_slice(pred);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per volume: id and Dice of every class, background first.
    pub per_volume: Vec<(String, Vec<f64>)>,
    /// Mean over volumes of each class's Dice.
    pub class_dice: Vec<f64>,
    /// Mean of the foreground entries of `class_dice`.
    pub mean_foreground: f64,
}

/// Scores `predict` on each volume, in parallel across volumes.
pub fn evaluate_with<P>(volumes: &[LabeledVolume], predict: P) -> Result<EvalReport>
where
    P: Fn(&LabeledVolume) -> Result<Vec<u8>> + Sync,
{
    let first = volumes
        .first()
        .ok_or_else(|| Error::EmptySplit("no volumes to evaluate".into()))?;
    let k = first.num_classes;
    let per_volume = volumes
        .par_iter()
        .map(|v| {
            let pred = predict(v)?;
            let dice = (0..k as u8)
                .map(|c| class_dice(&pred, &v.labels, c))
                .collect::<Result<Vec<f64>>>()?;
            Ok((v.id.clone(), dice))
        })
        .collect::<Result<Vec<_>>>()?;
    let class_dice: Vec<f64> = (0..k)
        .map(|c| per_volume.iter().map(|(_, d)| d[c]).sum::<f64>() / per_volume.len() as f64)
        .collect();
    let mean_foreground = class_dice[1..].iter().sum::<f64>() / (k - 1) as f64;
    Ok(EvalReport {
        per_volume,
        class_dice,
        mean_foreground,
    })
}

pub fn evaluate(model: &Model, volumes: &[LabeledVolume], batch_size: usize) -> Result<EvalReport> {
    evaluate_with(volumes, |v| predict_volume(model, v, batch_size))
}
