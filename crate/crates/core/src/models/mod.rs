//! The four model families over U-Net and SegNet backbones.
//!
//! Every model consumes a `[N, C, d, H, W]` slice stack (or volume patch for
//! the volumetric family) and produces softmax class probabilities.
//! Single-slice families emit `[N, K, 1, H, W]` for the central slice.

pub mod backbone;
pub mod layers;
pub mod transition;

pub use backbone::{Backbone, Rank};
pub use layers::{BatchNormConfig, CostTrace, ParamId, ParamKind, ParamStore, Phase, RunningStats};
pub use transition::{TransitionBlock, TransitionBlockSpec};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
use layers::{Builder, Forward};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "end2end_2d")]
    End2End2d,
    #[serde(rename = "proposed")]
    Proposed,
    #[serde(rename = "channel_based")]
    ChannelBased,
    #[serde(rename = "end2end_3d")]
    End2End3d,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::End2End2d, Mode::Proposed, Mode::ChannelBased, Mode::End2End3d];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::End2End2d => "end2end_2d",
            Mode::Proposed => "proposed",
            Mode::ChannelBased => "channel_based",
            Mode::End2End3d => "end2end_3d",
        }
    }

    /// Families that predict a single central slice.
    pub fn is_slicewise(self) -> bool {
        !matches!(self, Mode::End2End3d)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    #[serde(rename = "unet")]
    UNet,
    #[serde(rename = "segnet")]
    SegNet,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::UNet => "unet",
            BackboneKind::SegNet => "segnet",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_base_filters() -> usize {
    16
}

/// Declarative description of one experiment variant.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub mode: Mode,
    pub backbone: BackboneKind,
    /// Slices per input: 1 for 2D, odd for pseudo-3D, patch depth for 3D.
    pub depth: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_base_filters")]
    pub base_filters: usize,
}

impl ModelSpec {
    pub fn new(mode: Mode, backbone: BackboneKind, depth: usize, in_channels: usize, num_classes: usize) -> Self {
        Self {
            mode,
            backbone,
            depth,
            in_channels,
            num_classes,
            base_filters: default_base_filters(),
        }
    }

    pub fn with_base_filters(mut self, base: usize) -> Self {
        self.base_filters = base;
        self
    }

    /// Short stable identifier, e.g. `proposed-unet-d5`.
    pub fn label(&self) -> String {
        format!("{}-{}-d{}", self.mode, self.backbone, self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.in_channels == 0 || self.base_filters == 0 {
            return bad("in_channels and base_filters must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        match self.mode {
            Mode::End2End2d if self.depth != 1 => bad(format!("end2end_2d requires depth 1, got {}", self.depth)),
            Mode::Proposed if self.depth < 3 || self.depth.is_multiple_of(2) => {
                bad(format!("proposed requires an odd depth >= 3, got {}", self.depth))
            }
            // depth 1 is accepted as the degenerate fold
            Mode::ChannelBased if self.depth.is_multiple_of(2) => {
                bad(format!("channel_based requires an odd depth, got {}", self.depth))
            }
            Mode::End2End3d if self.depth == 0 || !self.depth.is_multiple_of(1 << backbone::LEVELS) => bad(format!(
                "end2end_3d depth {} must be a positive multiple of {}",
                self.depth,
                1 << backbone::LEVELS
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
enum InputStage {
    Identity,
    Transition(TransitionBlock),
    Fold,
}

/// Output of a forward pass.
pub struct ForwardOutput {
    pub probs: Var,
    /// Graph leaf for each parameter, in store order.
    pub param_vars: Vec<Var>,
    /// Batch statistics per batch-norm layer (training phase only).
    pub batch_stats: Vec<Option<RunningStats>>,
    /// Depth after each transition layer, starting at the input depth.
    pub depth_trace: Vec<usize>,
}

/// An assembled network with its parameters and running statistics.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    stats: Vec<RunningStats>,
    input: InputStage,
    backbone: Backbone,
    pub bn: BatchNormConfig,
}

impl Model {
    /// Builds and initialises the network described by `spec`.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder::new(ChaCha8Rng::seed_from_u64(seed));
        let (input, rank, backbone_in) = match spec.mode {
            Mode::End2End2d => (InputStage::Identity, Rank::Planar, spec.in_channels),
            Mode::Proposed => {
                let ts = TransitionBlockSpec::new(spec.depth, spec.in_channels, spec.base_filters)?;
                let block = TransitionBlock::build(&mut b, ts);
                let out = block.output_channels();
                (InputStage::Transition(block), Rank::Planar, out)
            }
            Mode::ChannelBased => (InputStage::Fold, Rank::Planar, spec.depth * spec.in_channels),
            Mode::End2End3d => (InputStage::Identity, Rank::Volumetric, spec.in_channels),
        };
        let backbone = Backbone::build(
            &mut b,
            spec.backbone,
            rank,
            backbone_in,
            spec.num_classes,
            spec.base_filters,
        );
        Ok(Self {
            spec: spec.clone(),
            params: b.params,
            stats: b.stats,
            input,
            backbone,
            bn: BatchNormConfig::default(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn set_running_stats(&mut self, stats: Vec<RunningStats>) {
        self.stats = stats;
    }

    pub fn transition(&self) -> Option<&TransitionBlock> {
        match &self.input {
            InputStage::Transition(t) => Some(t),
            _ => None,
        }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Expected `[C, d]` of one input sample.
    pub fn input_channels_depth(&self) -> (usize, usize) {
        (self.spec.in_channels, self.spec.depth)
    }

    fn check_input(&self, shape: [usize; 5]) -> Result<()> {
        if shape[1] != self.spec.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.spec.in_channels,
                got: shape[1],
            });
        }
        if self.spec.mode.is_slicewise() && shape[2] != self.spec.depth {
            return Err(Error::Shape(format!(
                "{} expects {} slices, got {}",
                self.spec.label(),
                self.spec.depth,
                shape[2]
            )));
        }
        Ok(())
    }

    /// Runs the network on `input` (`[N, C, d, H, W]`).
    ///
    /// `track_params` makes parameter leaves differentiable. In the training
    /// phase the returned batch statistics should be folded into the running
    /// statistics with [`Model::update_running_stats`].
    pub fn forward(&self, graph: &mut Graph, input: Var, phase: Phase, track_params: bool) -> Result<ForwardOutput> {
        self.check_input(graph.value(input).dims5()?)?;
        let mut fw = Forward::new(graph, &self.params, &self.stats, phase, self.bn, track_params);
        let x = match &self.input {
            InputStage::Identity => input,
            InputStage::Transition(block) => block.forward(&mut fw, input)?,
            InputStage::Fold => fw.graph.channel_fold(input)?,
        };
        let probs = self.backbone.forward(&mut fw, x)?;
        let (leaves, batch_stats, depth_trace) = fw.into_parts();
        let param_vars = leaves
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::InvalidSpec(format!("parameter {i} unused in forward pass"))))
            .collect::<Result<_>>()?;
        Ok(ForwardOutput {
            probs,
            param_vars,
            batch_stats,
            depth_trace,
        })
    }

    pub fn update_running_stats(&mut self, batch: &[Option<RunningStats>]) {
        let m = self.bn.momentum;
        for (running, observed) in self.stats.iter_mut().zip(batch) {
            if let Some(obs) = observed {
                for (r, o) in running.mean.iter_mut().zip(&obs.mean) {
                    *r = m * *r + (1.0 - m) * o;
                }
                for (r, o) in running.var.iter_mut().zip(&obs.var) {
                    *r = m * *r + (1.0 - m) * o;
                }
            }
        }
    }

    /// Symbolic pass: output shape plus FLOP and activation tallies for an
    /// input of shape `[N, C, d, H, W]`, without evaluating anything.
    pub fn trace(&self, input: [usize; 5]) -> Result<([usize; 5], CostTrace)> {
        self.check_input(input)?;
        let mut cost = CostTrace::default();
        let mut s = input;
        match &self.input {
            InputStage::Identity => {}
            InputStage::Transition(block) => s = block.trace(&self.params, s, &mut cost)?,
            InputStage::Fold => s = [s[0], s[1] * s[2], 1, s[3], s[4]],
        }
        let out = self.backbone.trace(&self.params, s, &mut cost)?;
        Ok((out, cost))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn spec_validation() {
        let s = |m, d| ModelSpec::new(m, BackboneKind::UNet, d, 1, 2);
        assert!(s(Mode::End2End2d, 1).validate().is_ok());
        assert!(s(Mode::End2End2d, 3).validate().is_err());
        assert!(s(Mode::Proposed, 1).validate().is_err());
        assert!(s(Mode::Proposed, 4).validate().is_err());
        assert!(s(Mode::Proposed, 5).validate().is_ok());
        assert!(s(Mode::ChannelBased, 1).validate().is_ok());
        assert!(s(Mode::ChannelBased, 6).validate().is_err());
        assert!(s(Mode::End2End3d, 16).validate().is_ok());
        assert!(s(Mode::End2End3d, 12).validate().is_err());
    }

    #[test]
    fn forward_shapes_for_each_family() {
        for (mode, depth) in [
            (Mode::End2End2d, 1),
            (Mode::Proposed, 5),
            (Mode::ChannelBased, 3),
            (Mode::End2End3d, 8),
        ] {
            for bb in [BackboneKind::UNet, BackboneKind::SegNet] {
                let spec = ModelSpec::new(mode, bb, depth, 2, 3).with_base_filters(2);
                let model = Model::new(&spec, 1).unwrap();
                let mut g = Graph::new();
                let x = g.leaf(Tensor::full(&[2, 2, depth, 8, 8], 0.5), false);
                let out = model.forward(&mut g, x, Phase::Train, false).unwrap();
                let out_depth = if mode == Mode::End2End3d { depth } else { 1 };
                assert_eq!(g.value(out.probs).shape(), &[2, 3, out_depth, 8, 8]);
                let (traced, _) = model.trace([2, 2, depth, 8, 8]).unwrap();
                assert_eq!(traced.to_vec(), g.value(out.probs).shape());
            }
        }
    }
}
