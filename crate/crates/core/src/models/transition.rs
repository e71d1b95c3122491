//! Transition block: depth-unpadded 3×3×3 convolutions that collapse a
//! `d`-slice stack to a single feature slice, two slices per layer.

use super::layers::{Builder, ConvBnRelu, CostTrace, Forward, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Var};

/// Layer count and per-layer `(in, out)` channel widths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionBlockSpec {
    pub num_layers: usize,
    pub channel_plan: Vec<(usize, usize)>,
}

impl TransitionBlockSpec {
    /// `floor(d / 2)` layers; first maps `channels → width`, the rest keep `width`.
    pub fn new(depth: usize, channels: usize, width: usize) -> Result<Self> {
        if depth < 3 || depth.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "transition block needs an odd slice count >= 3, got {depth}"
            )));
        }
        let num_layers = depth / 2;
        let channel_plan = (0..num_layers)
            .map(|i| if i == 0 { (channels, width) } else { (width, width) })
            .collect();
        Ok(Self {
            num_layers,
            channel_plan,
        })
    }

    /// Depth after each layer, starting with the input depth.
    pub fn depth_trace(&self) -> Vec<usize> {
        let d = 2 * self.num_layers + 1;
        (0..=self.num_layers).map(|i| d - 2 * i).collect()
    }
}

pub fn geometry() -> ConvGeometry {
    ConvGeometry::volumetric(3, [false, true, true])
}

#[derive(Clone, Debug)]
pub struct TransitionBlock {
    pub spec: TransitionBlockSpec,
    layers: Vec<ConvBnRelu>,
}

impl TransitionBlock {
    pub(crate) fn build(b: &mut Builder, spec: TransitionBlockSpec) -> Self {
        let layers = spec
            .channel_plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| b.scoped(&format!("transition{i}"), |b| b.conv_bn_relu(cin, cout, geometry())))
            .collect();
        Self { spec, layers }
    }

    pub fn input_depth(&self) -> usize {
        2 * self.spec.num_layers + 1
    }

    pub fn output_channels(&self) -> usize {
        self.spec.channel_plan.last().map(|p| p.1).unwrap_or(0)
    }

    /// `[N, C, d, H, W] → [N, width, 1, H, W]`, recording the depth after
    /// every layer in the forward state.
    pub fn forward(&self, fw: &mut Forward<'_>, mut x: Var) -> Result<Var> {
        let depth = fw.graph.value(x).dims5()?[2];
        if depth != self.input_depth() {
            return Err(Error::Shape(format!(
                "transition block built for depth {} received depth {depth}",
                self.input_depth()
            )));
        }
        fw.depth_trace.push(depth);
        for layer in &self.layers {
            x = layer.forward(fw, x)?;
            fw.depth_trace.push(fw.graph.value(x).dims5()?[2]);
        }
        Ok(x)
    }

    pub fn trace(&self, params: &ParamStore, mut shape: [usize; 5], cost: &mut CostTrace) -> Result<[usize; 5]> {
        if shape[2] != self.input_depth() {
            return Err(Error::Shape(format!(
                "transition block built for depth {} received depth {}",
                self.input_depth(),
                shape[2]
            )));
        }
        for layer in &self.layers {
            shape = layer.trace(params, shape, cost)?;
        }
        Ok(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_count_follows_floor_rule() {
        assert_eq!(TransitionBlockSpec::new(3, 4, 16).unwrap().num_layers, 1);
        assert_eq!(TransitionBlockSpec::new(13, 4, 16).unwrap().num_layers, 6);
        assert_eq!(
            TransitionBlockSpec::new(13, 4, 16).unwrap().depth_trace(),
            vec![13, 11, 9, 7, 5, 3, 1]
        );
    }

    #[test]
    fn rejects_even_or_small_depth() {
        assert!(TransitionBlockSpec::new(4, 4, 16).is_err());
        assert!(TransitionBlockSpec::new(1, 4, 16).is_err());
    }

    #[test]
    fn channel_plan() {
        let s = TransitionBlockSpec::new(7, 4, 16).unwrap();
        assert_eq!(s.channel_plan, vec![(4, 16), (16, 16), (16, 16)]);
    }
}
