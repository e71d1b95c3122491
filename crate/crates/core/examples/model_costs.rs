//! Parameter, FLOP and memory estimates for every variant of both backbones.

use anyhow::Result;
use pseudo3d::analysis::{cost_table, CostReport};
use pseudo3d::models::{BackboneKind, Mode, Model, ModelSpec};

fn main() -> Result<()> {
    let plane = [160, 192];
    let mut reports = Vec::new();
    for backbone in [BackboneKind::UNet, BackboneKind::SegNet] {
        let mut specs = vec![ModelSpec::new(Mode::End2End2d, backbone, 1, 4, 4)];
        for mode in [Mode::Proposed, Mode::ChannelBased] {
            specs.extend([3, 5, 7, 9, 11, 13].map(|d| ModelSpec::new(mode, backbone, d, 4, 4)));
        }
        specs.push(ModelSpec::new(Mode::End2End3d, backbone, 16, 4, 4));
        for spec in specs {
            reports.push(CostReport::measure(&Model::new(&spec, 0)?, plane)?);
        }
    }
    print!("{}", cost_table(&reports));
    Ok(())
}
