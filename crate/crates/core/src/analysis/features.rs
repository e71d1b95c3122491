//! Per-class structure depth, relative size and inter-slice displacement
//! over a set of label volumes.

use super::components::{regions, Region};
use crate::data::LabeledVolume;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// How region depths are combined into one value per class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthReduction {
    /// Mean over regions within a patient, then over patients containing the class.
    #[default]
    RegionMean,
    /// `Σ_p Σ_r φ / (P · Σ_{r=1..R_p} r)` over all `P` patients, with the
    /// denominator summing region indices.
    PrintedIndexSum,
}

fn class_regions(volumes: &[LabeledVolume], class: u8) -> Vec<Vec<Region>> {
    volumes.iter().map(|v| regions(&v.labels, v.dims, class)).collect()
}

/// Mean count of consecutive slices a region of `class` spans.
pub fn structure_depth(volumes: &[LabeledVolume], class: u8, reduction: DepthReduction) -> Result<f64> {
    let per_patient = class_regions(volumes, class);
    let present: Vec<&Vec<Region>> = per_patient.iter().filter(|r| !r.is_empty()).collect();
    if present.is_empty() {
        return Err(Error::ClassAbsent(class));
    }
    let total_depth = |rs: &[Region]| rs.iter().map(|r| r.depth() as f64).sum::<f64>();
    Ok(match reduction {
        DepthReduction::RegionMean => {
            present.iter().map(|rs| total_depth(rs) / rs.len() as f64).sum::<f64>() / present.len() as f64
        }
        DepthReduction::PrintedIndexSum => {
            let p = volumes.len() as f64;
            present
                .iter()
                .map(|rs| {
                    let n = rs.len() as f64;
                    total_depth(rs) / (p * n * (n + 1.0) / 2.0)
                })
                .sum()
        }
    })
}

fn uniform_dims(volumes: &[LabeledVolume]) -> Result<[usize; 3]> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidArgument("no volumes".into()))?;
    if volumes.iter().any(|v| v.dims != first.dims) {
        return Err(Error::Shape("structure features need a uniform volume shape".into()));
    }
    Ok(first.dims)
}

/// Fraction of all voxels, over every patient, labelled `class`.
pub fn structure_size(volumes: &[LabeledVolume], class: u8) -> Result<f64> {
    let dims = uniform_dims(volumes)?;
    let count: usize = volumes
        .iter()
        .map(|v| v.labels.iter().filter(|&&l| l == class).count())
        .sum();
    Ok(count as f64 / (volumes.len() * dims.iter().product::<usize>()) as f64)
}

/// In-plane centroid `(y, x)` of `class` on each slice, `None` where absent.
pub fn slice_centroids(volume: &LabeledVolume, class: u8) -> Vec<Option<(f64, f64)>> {
    let [d, h, w] = volume.dims;
    (0..d)
        .map(|z| {
            let (mut n, mut sy, mut sx) = (0usize, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    if volume.labels[(z * h + y) * w + x] == class {
                        n += 1;
                        sy += y as f64;
                        sx += x as f64;
                    }
                }
            }
            (n > 0).then(|| (sy / n as f64, sx / n as f64))
        })
        .collect()
}

/// Summed centroid travel between consecutive slices that both contain
/// `class`, divided by `P · D`.
pub fn structure_displacement(volumes: &[LabeledVolume], class: u8) -> Result<f64> {
    let [d, _, _] = uniform_dims(volumes)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for v in volumes {
        let c = slice_centroids(v, class);
        for s in 1..d {
            if let (Some(a), Some(b)) = (c[s - 1], c[s]) {
                total += (a.0 - b.0).hypot(a.1 - b.1);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Degenerate(format!(
            "class {class} never occupies two consecutive slices"
        )));
    }
    Ok(total / (volumes.len() * d) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFeatures {
    pub class: u8,
    pub depth: f64,
    pub size: f64,
    /// `None` when the class never spans two consecutive slices.
    pub displacement: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: impl Iterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.collect();
        (!v.is_empty()).then(|| Summary {
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Features of every foreground class present, with min/mean/max over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureFeatures {
    pub classes: Vec<ClassFeatures>,
    pub depth: Option<Summary>,
    pub size: Option<Summary>,
    pub displacement: Option<Summary>,
}

pub const FEATURES_HEADER: &str = "class,depth,size,displacement";

impl StructureFeatures {
    pub fn extract(volumes: &[LabeledVolume], reduction: DepthReduction) -> Result<Self> {
        uniform_dims(volumes)?;
        let k = volumes.iter().map(|v| v.num_classes).max().unwrap_or(0);
        let mut classes = Vec::new();
        for c in 1..k as u8 {
            let depth = match structure_depth(volumes, c, reduction) {
                Ok(d) => d,
                Err(Error::ClassAbsent(_)) => continue,
                Err(e) => return Err(e),
            };
            let displacement = match structure_displacement(volumes, c) {
                Ok(v) => Some(v),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            };
            classes.push(ClassFeatures {
                class: c,
                depth,
                size: structure_size(volumes, c)?,
                displacement,
            });
        }
        Ok(Self {
            depth: Summary::of(classes.iter().map(|c| c.depth)),
            size: Summary::of(classes.iter().map(|c| c.size)),
            displacement: Summary::of(classes.iter().filter_map(|c| c.displacement)),
            classes,
        })
    }

    /// One row per class, then `min`, `mean` and `max` rows; blank where undefined.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut s = format!("{FEATURES_HEADER}\n");
        for c in &self.classes {
            let _ = writeln!(s, "{},{:?},{:?},{}", c.class, c.depth, c.size, opt(c.displacement));
        }
        let pick = |sum: Option<Summary>, f: fn(&Summary) -> f64| opt(sum.as_ref().map(f));
        for (name, f) in [
            ("min", (|s: &Summary| s.min) as fn(&Summary) -> f64),
            ("mean", |s: &Summary| s.mean),
            ("max", |s: &Summary| s.max),
        ] {
            let _ = writeln!(
                s,
                "{name},{},{},{}",
                pick(self.depth, f),
                pick(self.size, f),
                pick(self.displacement, f)
            );
        }
        s
    }
}
