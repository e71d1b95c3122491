//! Labeled volumes, phantoms, preprocessing, slice stacks, augmentation and
//! cross-validation splits.
//!
//! Volumes are stored depth-major: images as `[C, D, H, W]`, label maps as
//! `[D, H, W]`.

mod augment;
mod folds;
pub mod io;
mod normalize;
mod phantom;
mod stack;
mod standardize;

pub use augment::{augment, AugmentConfig};
pub use folds::{make_folds, Fold};
pub use normalize::{normalize_ct, normalize_zscore, CT_RANGE};
pub use phantom::{
    generate_phantom, generate_set, ClassRecipe, Intensity, PhantomPreset, PhantomSpec, ShapeFamily, StructureMeta,
};
pub use stack::{assemble_batch, extract_patch, extract_stack, Batch, SliceStackSample};
pub use standardize::{resample, standardize_volume, Interpolation};

use crate::error::{Error, Result};

/// Image and label map of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub id: String,
    pub channels: usize,
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    /// Millimetres per voxel along `[D, H, W]`.
    pub spacing: [f64; 3],
    pub num_classes: usize,
    /// `[C, D, H, W]`.
    pub image: Vec<f64>,
    /// `[D, H, W]`.
    pub labels: Vec<u8>,
}

impl LabeledVolume {
    pub fn new(
        id: impl Into<String>,
        channels: usize,
        dims: [usize; 3],
        spacing: [f64; 3],
        num_classes: usize,
        image: Vec<f64>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let voxels: usize = dims.iter().product();
        if voxels == 0 || channels == 0 {
            return Err(Error::Extent(format!("empty volume {dims:?} with {channels} channels")));
        }
        if image.len() != channels * voxels || labels.len() != voxels {
            return Err(Error::Shape(format!(
                "image of {} and labels of {} values for {channels} × {dims:?}",
                image.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} >= {num_classes} classes")));
        }
        Ok(Self {
            id: id.into(),
            channels,
            dims,
            spacing,
            num_classes,
            image,
            labels,
        })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    /// Image values of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.image[c * n..(c + 1) * n]
    }

    pub fn label_slice(&self, z: usize) -> &[u8] {
        let s = self.slice_len();
        &self.labels[z * s..(z + 1) * s]
    }

    /// Applies `f` to every channel independently.
    pub fn map_channels(&mut self, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<()> {
        let n = self.voxels();
        for c in 0..self.channels {
            let out = f(&self.image[c * n..(c + 1) * n])?;
            self.image[c * n..(c + 1) * n].copy_from_slice(&out);
        }
        Ok(())
    }
}
