//! Slice stacks for planar and pseudo-3D models, depth patches for volumetric
//! ones, and their assembly into training batches.

use super::LabeledVolume;
use crate::error::{Error, Result};
use crate::losses::one_hot;
use crate::tensor::Tensor;

/// An input block `[C, d, H, W]` and the label slices it predicts.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStackSample {
    pub channels: usize,
    /// `[d, H, W]`.
    pub input_dims: [usize; 3],
    pub input: Vec<f64>,
    /// Labels `[t, H, W]`; one slice for stacks, the full patch for volumetric samples.
    pub target: Vec<u8>,
    pub target_depth: usize,
    /// Source slice of the target (stacks) or the first slice (patches).
    pub center_index: usize,
}

impl SliceStackSample {
    pub fn slice_len(&self) -> usize {
        self.input_dims[1] * self.input_dims[2]
    }

    /// One-hot target `[1, K, t, H, W]`.
    pub fn target_one_hot(&self, classes: usize) -> Result<Tensor> {
        let [_, h, w] = self.input_dims;
        one_hot(&self.target, classes, 1, &[self.target_depth, h, w])
    }
}

/// `d` slices centred on `center`, replicating the nearest edge slice past
/// either end of the volume.
pub fn extract_stack(volume: &LabeledVolume, center: usize, d: usize) -> Result<SliceStackSample> {
    if d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("slice count must be odd, got {d}")));
    }
    let depth = volume.dims[0];
    if center >= depth {
        return Err(Error::InvalidArgument(format!("center {center} outside {depth} slices")));
    }
    let half = (d / 2) as isize;
    let sources: Vec<usize> = (-half..=half)
        .map(|o| (center as isize + o).clamp(0, depth as isize - 1) as usize)
        .collect();
    Ok(gather(volume, &sources, center, volume.label_slice(center).to_vec(), 1))
}

/// `depth` consecutive slices starting at `start`, with all their labels.
pub fn extract_patch(volume: &LabeledVolume, start: usize, depth: usize) -> Result<SliceStackSample> {
    if depth == 0 || start + depth > volume.dims[0] {
        return Err(Error::InvalidArgument(format!(
            "patch {start}..{} outside {} slices",
            start + depth,
            volume.dims[0]
        )));
    }
    let s = volume.slice_len();
    let sources: Vec<usize> = (start..start + depth).collect();
    let target = volume.labels[start * s..(start + depth) * s].to_vec();
    Ok(gather(volume, &sources, start, target, depth))
}

fn gather(volume: &LabeledVolume, sources: &[usize], center: usize, target: Vec<u8>, target_depth: usize) -> SliceStackSample {
    let s = volume.slice_len();
    let mut input = Vec::with_capacity(volume.channels * sources.len() * s);
    for c in 0..volume.channels {
        let ch = volume.channel(c);
        for &z in sources {
            input.extend_from_slice(&ch[z * s..(z + 1) * s]);
        }
    }
    SliceStackSample {
        channels: volume.channels,
        input_dims: [sources.len(), volume.dims[1], volume.dims[2]],
        input,
        target,
        target_depth,
        center_index: center,
    }
}

/// Stacked inputs `[N, C, d, H, W]` and one-hot targets `[N, K, t, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: Tensor,
    pub target: Tensor,
    pub labels: Vec<u8>,
}

pub fn assemble_batch(samples: &[&SliceStackSample], classes: usize) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot assemble an empty batch".into()))?;
    let [d, h, w] = first.input_dims;
    let mut input = Vec::with_capacity(samples.len() * first.input.len());
    let mut labels = Vec::with_capacity(samples.len() * first.target.len());
    for s in samples {
        if s.input_dims != first.input_dims || s.channels != first.channels || s.target_depth != first.target_depth {
            return Err(Error::Shape("samples in a batch must share their shape".into()));
        }
        input.extend_from_slice(&s.input);
        labels.extend_from_slice(&s.target);
    }
    let n = samples.len();
    Ok(Batch {
        input: Tensor::new(vec![n, first.channels, d, h, w], input)?,
        target: one_hot(&labels, classes, n, &[first.target_depth, h, w])?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every voxel of slice `z` holds `z`; labels are `z % 3`.
    fn ramp(depth: usize) -> LabeledVolume {
        let (h, w) = (2, 3);
        let image = (0..depth * h * w).map(|i| (i / (h * w)) as f64).collect();
        let labels = (0..depth * h * w).map(|i| (i / (h * w) % 3) as u8).collect();
        LabeledVolume::new("ramp", 1, [depth, h, w], [1.0; 3], 3, image, labels).unwrap()
    }

    fn slice_ids(s: &SliceStackSample) -> Vec<usize> {
        s.input.chunks(s.slice_len()).map(|c| c[0] as usize).collect()
    }

    #[test]
    fn interior_and_edge_stacks() {
        let v = ramp(20);
        assert_eq!(slice_ids(&extract_stack(&v, 10, 5).unwrap()), vec![8, 9, 10, 11, 12]);
        assert_eq!(slice_ids(&extract_stack(&v, 0, 5).unwrap()), vec![0, 0, 0, 1, 2]);
        assert_eq!(slice_ids(&extract_stack(&v, 19, 5).unwrap()), vec![17, 18, 19, 19, 19]);
        let one = extract_stack(&v, 7, 1).unwrap();
        assert_eq!(one.input, v.channel(0)[7 * 6..8 * 6].to_vec());
        assert!(extract_stack(&v, 3, 4).is_err());
    }

    #[test]
    fn every_label_voxel_is_a_target_exactly_once() {
        let v = ramp(9);
        let targets: Vec<u8> = (0..9).flat_map(|z| extract_stack(&v, z, 3).unwrap().target).collect();
        assert_eq!(targets, v.labels);
    }

    #[test]
    fn batch_shapes() {
        let v = ramp(8);
        let a = extract_stack(&v, 1, 3).unwrap();
        let b = extract_stack(&v, 2, 3).unwrap();
        let batch = assemble_batch(&[&a, &b], 3).unwrap();
        assert_eq!(batch.input.shape(), &[2, 1, 3, 2, 3]);
        assert_eq!(batch.target.shape(), &[2, 3, 1, 2, 3]);
        let p = extract_patch(&v, 0, 8).unwrap();
        assert_eq!(assemble_batch(&[&p], 3).unwrap().target.shape(), &[1, 3, 8, 2, 3]);
        assert!(extract_patch(&v, 4, 8).is_err());
    }
}
