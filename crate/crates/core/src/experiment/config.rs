//! TOML experiment description.

use crate::data::PhantomPreset;
use crate::error::{Error, Result};
use crate::models::{BackboneKind, Mode, ModelSpec};
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Where per-cell artifacts and the aggregate table go.
    pub output_dir: PathBuf,
    /// Seeds phantom generation, fold assignment and weight initialisation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub source: Source,
    pub grid: GridConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_folds() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Phantom(PhantomSource),
    Volumes(VolumeSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSource {
    pub preset: PhantomPreset,
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSource {
    pub path: PathBuf,
    pub num_classes: usize,
    #[serde(default)]
    pub normalize: Normalization,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// CT window clip and rescale.
    Ct,
    /// Per-channel, per-volume zero mean and unit variance.
    Zscore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub modes: Vec<Mode>,
    #[serde(default = "default_backbones")]
    pub backbones: Vec<BackboneKind>,
    /// Slice counts for the proposed and channel-based modes.
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    /// Patch depth of the volumetric mode.
    #[serde(default = "default_patch_depth")]
    pub patch_depth: usize,
    #[serde(default = "default_base_filters")]
    pub base_filters: usize,
}

fn default_backbones() -> Vec<BackboneKind> {
    vec![BackboneKind::UNet]
}

fn default_depths() -> Vec<usize> {
    vec![3, 5, 7, 9, 11, 13]
}

fn default_patch_depth() -> usize {
    16
}

fn default_base_filters() -> usize {
    16
}

impl GridConfig {
    /// Every cell: 2D and 3D once per backbone, slice-stack modes once per depth.
    pub fn cells(&self, in_channels: usize, num_classes: usize) -> Vec<ModelSpec> {
        let mut out = Vec::new();
        for &backbone in &self.backbones {
            for &mode in &self.modes {
                let depths = match mode {
                    Mode::End2End2d => vec![1],
                    Mode::Proposed | Mode::ChannelBased => self.depths.clone(),
                    Mode::End2End3d => vec![self.patch_depth],
                };
                for d in depths {
                    out.push(
                        ModelSpec::new(mode, backbone, d, in_channels, num_classes).with_base_filters(self.base_filters),
                    );
                }
            }
        }
        out
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().message().to_string();
            // unknown keys are reported at their own path, not their parent's
            let path = match message.strip_prefix("unknown field `").and_then(|m| m.split('`').next()) {
                Some(key) if path == "." => key.to_string(),
                Some(key) if path != key && !path.ends_with(&format!(".{key}")) => format!("{path}.{key}"),
                _ => path,
            };
            Error::Config { path, message }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: path.to_string(),
                message,
            })
        };
        if self.grid.modes.is_empty() || self.grid.backbones.is_empty() {
            return bad("grid", "needs at least one mode and one backbone".into());
        }
        let stacked = self.grid.modes.iter().any(|m| matches!(m, Mode::Proposed | Mode::ChannelBased));
        if stacked && self.grid.depths.is_empty() {
            return bad("grid.depths", "slice-stack modes need at least one depth".into());
        }
        for (i, spec) in self.grid.cells(1, 2).iter().enumerate() {
            if let Err(e) = spec.validate() {
                return bad("grid", format!("cell {i} ({}): {e}", spec.label()));
            }
        }
        if self.folds < 2 {
            return bad("folds", format!("need at least 2 folds, got {}", self.folds));
        }
        if let Err(e) = self.train.validate() {
            return bad("train", e.to_string());
        }
        match &self.source {
            Source::Phantom(p) => {
                if p.count < self.folds {
                    return bad("source.phantom.count", format!("{} phantoms for {} folds", p.count, self.folds));
                }
                if self.grid.modes.contains(&Mode::End2End3d) && self.grid.patch_depth > p.dims[0] {
                    return bad(
                        "grid.patch_depth",
                        format!("patch depth {} exceeds {} slices", self.grid.patch_depth, p.dims[0]),
                    );
                }
            }
            Source::Volumes(v) => {
                if v.num_classes < 2 {
                    return bad("source.volumes.num_classes", "need at least 2 classes".into());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
output_dir = "runs/demo"
seed = 3
folds = 2

[source.phantom]
preset = "kidney"
dims = [16, 32, 32]
count = 4

[grid]
modes = ["end2end_2d", "proposed", "channel_based", "end2end_3d"]
backbones = ["unet", "segnet"]

[train]
max_epochs = 2
batch_size = 4
"#;

    #[test]
    fn full_grid_has_fourteen_cells_per_backbone() {
        let c = ExperimentConfig::parse(EXAMPLE).unwrap();
        let cells = c.grid.cells(1, 3);
        assert_eq!(cells.len(), 28);
        assert_eq!(cells[0].label(), "end2end_2d-unet-d1");
        assert_eq!(cells[13].label(), "end2end_3d-unet-d16");
        assert_eq!(c.train.max_epochs, 2);
        assert_eq!(c.train.initial_lr, 1e-4);
    }

    #[test]
    fn roundtrips_through_text() {
        let c = ExperimentConfig::parse(EXAMPLE).unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
        let v = ExperimentConfig {
            source: Source::Volumes(VolumeSource {
                path: "data".into(),
                num_classes: 3,
                normalize: Normalization::Zscore,
            }),
            ..c
        };
        assert_eq!(ExperimentConfig::parse(&v.to_toml().unwrap()).unwrap(), v);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let path_of = |text: &str| match ExperimentConfig::parse(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(path_of(&EXAMPLE.replace("max_epochs", "max_epoch")), "train.max_epoch");
        assert_eq!(path_of(&EXAMPLE.replace("count = 4", "count = 4\ncolour = 1")), "source.phantom.colour");
        assert_eq!(path_of(&format!("typo = 1\n{EXAMPLE}")), "typo");
        assert_eq!(path_of(&EXAMPLE.replace("\"segnet\"", "\"resnet\"")), "grid.backbones[1]");
        assert_eq!(path_of(&EXAMPLE.replace("[train]", "[train.augment]\nshear = 0.1\nblur = 2\n[train]")), "train.augment.blur");
    }

    #[test]
    fn semantic_errors_report_their_path() {
        let path_of = |text: &str| match ExperimentConfig::parse(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(path_of(&EXAMPLE.replace("folds = 2", "folds = 1")), "folds");
        assert_eq!(path_of(&EXAMPLE.replace("count = 4", "count = 1")), "source.phantom.count");
        assert_eq!(path_of(&EXAMPLE.replace("backbones", "depths = [4]\nbackbones")), "grid");
    }
}
