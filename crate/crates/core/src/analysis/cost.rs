//! Parameter, FLOP, memory and timing profile of one model configuration.

use crate::data::{assemble_batch, SliceStackSample};
use crate::error::Result;
use crate::models::{Model, ModelSpec, Phase};
use crate::tensor::{Graph, Tensor};
use crate::training::{train_step, AdamConfig, AdamState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Bytes per stored scalar.
pub const SCALAR_BYTES: u128 = std::mem::size_of::<f64>() as u128;

pub fn count_params(model: &Model) -> usize {
    model.param_count()
}

/// Twice the multiply-accumulates of every convolution-type layer for an
/// input of shape `[N, C, d, H, W]`.
pub fn count_flops(model: &Model, input: [usize; 5]) -> Result<u128> {
    Ok(model.trace(input)?.1.flops)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    /// `[N, C, d, H, W]` the counts refer to.
    pub input_shape: [usize; 5],
    pub parameter_count: usize,
    pub flop_count: u128,
    /// Every intermediate activation of one forward pass.
    pub activation_bytes: u128,
    pub parameter_bytes: u128,
    pub epoch_seconds: Option<f64>,
    pub predict_seconds_per_sample: Option<f64>,
}

pub const COST_HEADER: &str = "label,input_shape,parameter_count,flops_2x_mac,activation_bytes,parameter_bytes,memory_estimate_bytes,epoch_seconds,predict_seconds_per_sample";

impl CostReport {
    /// Counts for one sample (`N = 1`) of `[C, d, H, W]` per the spec.
    pub fn measure(model: &Model, plane: [usize; 2]) -> Result<Self> {
        let spec = model.spec();
        let input = [1, spec.in_channels, spec.depth, plane[0], plane[1]];
        let (_, trace) = model.trace(input)?;
        let parameter_count = model.param_count();
        Ok(Self {
            label: spec.label(),
            input_shape: input,
            parameter_count,
            flop_count: trace.flops,
            activation_bytes: trace.activation_elements * SCALAR_BYTES,
            parameter_bytes: parameter_count as u128 * SCALAR_BYTES,
            epoch_seconds: None,
            predict_seconds_per_sample: None,
        })
    }

    pub fn memory_estimate_bytes(&self) -> u128 {
        self.activation_bytes + self.parameter_bytes
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let shape = self.input_shape.map(|e| e.to_string()).join("x");
        format!(
            "{},{shape},{},{},{},{},{},{},{}",
            self.label,
            self.parameter_count,
            self.flop_count,
            self.activation_bytes,
            self.parameter_bytes,
            self.memory_estimate_bytes(),
            opt(self.epoch_seconds),
            opt(self.predict_seconds_per_sample)
        )
    }
}

pub fn cost_table(reports: &[CostReport]) -> String {
    let mut s = format!("{COST_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Synthetic samples with random intensities and labels, for timing only.
pub fn synthetic_samples(spec: &ModelSpec, plane: [usize; 2], count: usize, seed: u64) -> Vec<SliceStackSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = plane;
    let target_depth = if spec.mode.is_slicewise() { 1 } else { spec.depth };
    (0..count)
        .map(|i| SliceStackSample {
            channels: spec.in_channels,
            input_dims: [spec.depth, h, w],
            input: (0..spec.in_channels * spec.depth * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            target: (0..target_depth * h * w)
                .map(|_| rng.gen_range(0..spec.num_classes as u8))
                .collect(),
            target_depth,
            center_index: i,
        })
        .collect()
}

/// Times `repeats` training steps and batched predictions on synthetic data;
/// the epoch time extrapolates to `samples_per_epoch`.
pub fn measure_timings(
    model: &Model,
    plane: [usize; 2],
    config: &TrainConfig,
    samples_per_epoch: usize,
    repeats: usize,
) -> Result<(f64, f64)> {
    let bs = config.batch_size_for(model);
    let samples = synthetic_samples(model.spec(), plane, bs, config.seed);
    let refs: Vec<&SliceStackSample> = samples.iter().collect();
    let batch = assemble_batch(&refs, model.spec().num_classes)?;
    let mut m = model.clone();
    let mut adam = AdamState::new(m.params(), AdamConfig::default());
    let repeats = repeats.max(1);
    let t = Instant::now();
    for _ in 0..repeats {
        train_step(&mut m, &mut adam, batch.input.clone(), batch.target.clone(), config.initial_lr, config)?;
    }
    let per_step = t.elapsed().as_secs_f64() / repeats as f64;
    let t = Instant::now();
    for _ in 0..repeats {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::clone(&batch.input), false);
        model.forward(&mut g, x, Phase::Infer, false)?;
    }
    let per_sample = t.elapsed().as_secs_f64() / (repeats * bs) as f64;
    Ok((per_step * samples_per_epoch.div_ceil(bs) as f64, per_sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BackboneKind, Mode};

    fn model(mode: Mode, d: usize) -> Model {
        Model::new(&ModelSpec::new(mode, BackboneKind::UNet, d, 4, 4), 0).unwrap()
    }

    #[test]
    fn params_match_store_and_ignore_plane() {
        let m = model(Mode::Proposed, 3);
        let total: usize = m.params().values().iter().map(Tensor::numel).sum();
        assert_eq!(count_params(&m), total);
        let a = CostReport::measure(&m, [16, 16]).unwrap();
        let b = CostReport::measure(&m, [32, 48]).unwrap();
        assert_eq!(a.parameter_count, b.parameter_count);
        assert_eq!(b.flop_count, 6 * a.flop_count);
        assert_eq!(b.activation_bytes, 6 * a.activation_bytes);
    }

    #[test]
    fn flops_are_ordered_by_added_layers() {
        let f = |mode, d| count_flops(&model(mode, d), [1, 4, d, 32, 32]).unwrap();
        let (two_d, p3, p13) = (f(Mode::End2End2d, 1), f(Mode::Proposed, 3), f(Mode::Proposed, 13));
        assert!(two_d < p3 && p3 < p13);
    }

    #[test]
    fn report_row_layout() {
        let mut r = CostReport::measure(&model(Mode::End2End2d, 1), [16, 16]).unwrap();
        r.epoch_seconds = Some(0.5);
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), COST_HEADER.split(',').count());
        assert!(row.starts_with("end2end_2d-unet-d1,1x4x1x16x16,"));
        assert!(row.ends_with(",0.5,"));
        assert_eq!(r.memory_estimate_bytes(), r.activation_bytes + r.parameter_bytes);
    }

    #[test]
    fn timings_are_positive() {
        let spec = ModelSpec::new(Mode::Proposed, BackboneKind::UNet, 3, 1, 2).with_base_filters(2);
        let m = Model::new(&spec, 0).unwrap();
        let (epoch, predict) = measure_timings(&m, [16, 16], &TrainConfig::default(), 20, 1).unwrap();
        assert!(epoch > 0.0 && predict > 0.0);
    }
}
