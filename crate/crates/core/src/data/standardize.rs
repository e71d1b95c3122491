//! Resample to a target spacing, zero-pad symmetrically, then downsample to
//! the network's input shape.

use super::LabeledVolume;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    /// Trilinear, with edge clamping.
    Linear,
    Nearest,
}

/// Voxel-centre aligned map from output index to fractional input index.
fn source_coordinate(i: usize, from: usize, to: usize) -> f64 {
    let s = (i as f64 + 0.5) * from as f64 / to as f64 - 0.5;
    s.clamp(0.0, (from - 1) as f64)
}

/// Resamples one `[D, H, W]` grid to `to`.
pub fn resample(values: &[f64], from: [usize; 3], to: [usize; 3], mode: Interpolation) -> Vec<f64> {
    let [fd, fh, fw] = from;
    let coords: Vec<Vec<f64>> = (0..3).map(|a| (0..to[a]).map(|i| source_coordinate(i, from[a], to[a])).collect()).collect();
    let at = |z: usize, y: usize, x: usize| values[(z * fh + y) * fw + x];
    let mut out = Vec::with_capacity(to.iter().product());
    for &sz in &coords[0] {
        for &sy in &coords[1] {
            for &sx in &coords[2] {
                let v = match mode {
                    Interpolation::Nearest => at(sz.round() as usize, sy.round() as usize, sx.round() as usize),
                    Interpolation::Linear => {
                        let (z0, y0, x0) = (sz.floor() as usize, sy.floor() as usize, sx.floor() as usize);
                        let (z1, y1, x1) = ((z0 + 1).min(fd - 1), (y0 + 1).min(fh - 1), (x0 + 1).min(fw - 1));
                        let (tz, ty, tx) = (sz - z0 as f64, sy - y0 as f64, sx - x0 as f64);
                        let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
                        let plane = |z| {
                            lerp(
                                lerp(at(z, y0, x0), at(z, y0, x1), tx),
                                lerp(at(z, y1, x0), at(z, y1, x1), tx),
                                ty,
                            )
                        };
                        lerp(plane(z0), plane(z1), tz)
                    }
                };
                out.push(v);
            }
        }
    }
    out
}

fn resample_volume(v: &LabeledVolume, to: [usize; 3]) -> LabeledVolume {
    let n = v.voxels();
    let mut image = Vec::with_capacity(v.channels * to.iter().product::<usize>());
    for c in 0..v.channels {
        image.extend(resample(&v.image[c * n..(c + 1) * n], v.dims, to, Interpolation::Linear));
    }
    let labels_f: Vec<f64> = v.labels.iter().map(|&l| l as f64).collect();
    let labels = resample(&labels_f, v.dims, to, Interpolation::Nearest)
        .into_iter()
        .map(|l| l as u8)
        .collect();
    let spacing = std::array::from_fn(|a| v.spacing[a] * v.dims[a] as f64 / to[a] as f64);
    LabeledVolume {
        id: v.id.clone(),
        channels: v.channels,
        dims: to,
        spacing,
        num_classes: v.num_classes,
        image,
        labels,
    }
}

fn pad_volume(v: &LabeledVolume, to: [usize; 3]) -> Result<LabeledVolume> {
    if (0..3).any(|a| to[a] < v.dims[a]) {
        return Err(Error::Extent(format!(
            "pad shape {to:?} is smaller than the resampled shape {:?}",
            v.dims
        )));
    }
    let before: [usize; 3] = std::array::from_fn(|a| (to[a] - v.dims[a]) / 2);
    let [d, h, w] = v.dims;
    let voxels: usize = to.iter().product();
    let mut image = vec![0.0; v.channels * voxels];
    let mut labels = vec![0u8; voxels];
    for z in 0..d {
        for y in 0..h {
            let src = (z * h + y) * w;
            let dst = ((z + before[0]) * to[1] + y + before[1]) * to[2] + before[2];
            labels[dst..dst + w].copy_from_slice(&v.labels[src..src + w]);
            for c in 0..v.channels {
                image[c * voxels + dst..c * voxels + dst + w]
                    .copy_from_slice(&v.image[c * v.voxels() + src..c * v.voxels() + src + w]);
            }
        }
    }
    Ok(LabeledVolume {
        dims: to,
        image,
        labels,
        ..v.clone()
    })
}

/// Resample to `target_spacing` (labels nearest-neighbour), pad to
/// `pad_shape`, then downsample to exactly `final_shape`.
pub fn standardize_volume(
    volume: &LabeledVolume,
    target_spacing: [f64; 3],
    pad_shape: [usize; 3],
    final_shape: [usize; 3],
) -> Result<LabeledVolume> {
    if target_spacing.iter().any(|&s| s <= 0.0) || final_shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "spacing {target_spacing:?} and final shape {final_shape:?} must be positive"
        )));
    }
    let resampled: [usize; 3] = std::array::from_fn(|a| {
        ((volume.dims[a] as f64 * volume.spacing[a] / target_spacing[a]).round() as usize).max(1)
    });
    let r = resample_volume(volume, resampled);
    let mut padded = pad_volume(&r, pad_shape)?;
    padded.spacing = target_spacing;
    Ok(resample_volume(&padded, final_shape))
}
