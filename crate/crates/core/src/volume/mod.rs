//! Volumes, label maps and everything between a file on disk and a
//! training patch.
//!
//! Grids are stored with x varying fastest (`index = x + nx * (y + ny * z)`),
//! the NIfTI convention. As a tensor the same buffer has shape `[nz, ny, nx]`.

mod augment;
mod nifti;
mod normalize;
mod patch;
mod phantom;
mod raw;
mod resample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;

pub use augment::{augment_contrast, augment_gaussian, blur_gaussian, scale_contrast};
pub use nifti::{
    decode as decode_nifti, encode as encode_nifti, read_labels, read_nifti, read_volume, write_labels, write_nifti, write_volume, NiftiImage, NiftiType,
};
pub use normalize::{normalize_modality, CT_WINDOW, MR_SCALE, SUV_SCALE};
pub use patch::{extract_grid_patches, grid_corners, sample_training_patch, PatchSample};
pub use phantom::{add_lesion, category_levels, synth_phantom, Phantom, BACKGROUND_LEVEL, LESION_LEVELS};
pub use raw::{read_raw, read_raw_labels, write_raw, write_raw_labels};
pub use resample::{resample_isotropic, resample_labels, DEFAULT_SPACING_MM};

/// Injected dose and body weight for body-weight SUV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PetMeta {
    pub injected_dose_mbq: f64,
    pub body_weight_kg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    /// Extents along x, y, z.
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub modality: Modality,
    pub pet_meta: Option<PetMeta>,
    pub normalized: bool,
}

impl Volume {
    pub fn new(data: Vec<f32>, dims: [usize; 3], spacing_mm: [f64; 3], modality: Modality) -> Result<Self> {
        check_grid(data.len(), dims, spacing_mm)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "volume" });
        }
        Ok(Self { data, dims, spacing_mm, modality, pet_meta: None, normalized: false })
    }

    pub fn with_pet_meta(mut self, meta: PetMeta) -> Self {
        self.pet_meta = Some(meta);
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Tensor-order shape `[nz, ny, nx]`.
    pub fn shape_zyx(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[index(self.dims, x, y, z)]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }
}

/// Integer label grid; 0 is background and `category_table[i]` names label `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub labels: Vec<u16>,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub category_table: Vec<String>,
}

impl LabelVolume {
    pub fn new(labels: Vec<u16>, dims: [usize; 3], spacing_mm: [f64; 3], category_table: Vec<String>) -> Result<Self> {
        check_grid(labels.len(), dims, spacing_mm)?;
        if category_table.is_empty() {
            return Err(Error::Data("category table needs at least the background entry".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= category_table.len()) {
            return Err(Error::Data(format!("label {bad} missing from a category table of {} entries", category_table.len())));
        }
        Ok(Self { labels, dims, spacing_mm, category_table })
    }

    /// Names `background, <names...>`.
    pub fn table_with_background(names: &[String]) -> Vec<String> {
        std::iter::once("background".to_string()).chain(names.iter().cloned()).collect()
    }

    pub fn num_foreground(&self) -> usize {
        self.category_table.len() - 1
    }

    pub fn numel(&self) -> usize {
        self.labels.len()
    }

    pub fn mask(&self, label: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }

    pub fn same_grid(&self, dims: [usize; 3], spacing: [f64; 3]) -> bool {
        self.dims == dims && self.spacing_mm == spacing
    }
}

pub(crate) fn index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

fn check_grid(len: usize, dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.iter().product::<usize>() != len {
        return Err(Error::shape("volume", format!("dims {:?} need {} voxels, got {}", dims, dims.iter().product::<usize>(), len)));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Data("empty volume".into()));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Data(format!("spacing {:?} must be positive", spacing)));
    }
    Ok(())
}
