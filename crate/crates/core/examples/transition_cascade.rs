//! Depth of the feature map after each transition-block layer.

use anyhow::Result;
use pseudo3d::models::{BackboneKind, Mode, Model, ModelSpec, Phase};
use pseudo3d::tensor::{Graph, Tensor};

fn main() -> Result<()> {
    for d in [3, 5, 7, 9, 11, 13] {
        let spec = ModelSpec::new(Mode::Proposed, BackboneKind::UNet, d, 1, 2);
        let model = Model::new(&spec, 0)?;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, d, 16, 16], 0.5), false);
        let out = model.forward(&mut g, x, Phase::Infer, false)?;
        let block = model.transition().expect("proposed mode has a transition block");
        println!(
            "d={d:>2}: depths {:?}, block output {} channels, probabilities {:?}",
            out.depth_trace,
            block.output_channels(),
            g.value(out.probs).shape()
        );
    }
    Ok(())
}
