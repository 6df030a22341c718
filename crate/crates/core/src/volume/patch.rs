use rand::Rng;

use super::{LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::modality::Modality;

/// A cubic crop, zero padded where the volume is smaller than the patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub image: Vec<f32>,
    pub labels: Option<Vec<u16>>,
    pub size: usize,
    pub modality: Modality,
    pub source_id: String,
    /// Corner `(x, y, z)` in the source grid.
    pub corner: [usize; 3],
}

fn crop<T: Copy + Default>(src: &[T], dims: [usize; 3], corner: [usize; 3], size: usize) -> Vec<T> {
    let mut out = vec![T::default(); size * size * size];
    for z in 0..size {
        let sz = corner[2] + z;
        if sz >= dims[2] {
            break;
        }
        for y in 0..size {
            let sy = corner[1] + y;
            if sy >= dims[1] {
                break;
            }
            let w = size.min(dims[0].saturating_sub(corner[0]));
            let s = corner[0] + dims[0] * (sy + dims[1] * sz);
            out[(z * size + y) * size..][..w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

fn check(vol: &Volume, size: usize) -> Result<()> {
    if vol.data.is_empty() {
        return Err(Error::Data("empty volume".into()));
    }
    if size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    Ok(())
}

/// Random training crop. With probability 1/2 the corner is drawn so the
/// patch contains a random foreground voxel (when there is one).
pub fn sample_training_patch(vol: &Volume, labels: &LabelVolume, size: usize, source_id: &str, rng: &mut impl Rng) -> Result<PatchSample> {
    check(vol, size)?;
    if labels.dims != vol.dims {
        return Err(Error::shape("patch", format!("labels {:?} vs image {:?}", labels.dims, vol.dims)));
    }
    let fg_biased = rng.gen_bool(0.5);
    let mut corner = [0; 3];
    let foreground = if fg_biased {
        let count = labels.labels.iter().filter(|&&l| l != 0).count();
        (count > 0).then(|| {
            let k = rng.gen_range(0..count);
            let i = labels.labels.iter().enumerate().filter(|(_, &l)| l != 0).nth(k).unwrap().0;
            let d = vol.dims;
            [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])]
        })
    } else {
        None
    };
    for a in 0..3 {
        let slack = vol.dims[a].saturating_sub(size);
        corner[a] = match foreground {
            Some(v) => {
                let lo = (v[a] + 1).saturating_sub(size);
                let hi = v[a].min(slack);
                rng.gen_range(lo..=hi)
            }
            None => rng.gen_range(0..=slack),
        };
    }
    Ok(PatchSample {
        image: crop(&vol.data, vol.dims, corner, size),
        labels: Some(crop(&labels.labels, labels.dims, corner, size)),
        size,
        modality: vol.modality,
        source_id: source_id.to_string(),
        corner,
    })
}

/// Corners along one axis: multiples of `stride`, with the last patch
/// clamped inward so it ends at the volume edge.
pub fn grid_corners(n: usize, size: usize, stride: usize) -> Vec<usize> {
    if n <= size {
        return vec![0];
    }
    let last = n - size;
    let mut out: Vec<usize> = (0..last).step_by(stride.max(1)).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Regular inference tiling.
pub fn extract_grid_patches(vol: &Volume, size: usize, stride: usize, source_id: &str) -> Result<Vec<PatchSample>> {
    check(vol, size)?;
    if stride == 0 {
        return Err(Error::Config("patch stride must be positive".into()));
    }
    let axes: Vec<Vec<usize>> = (0..3).map(|a| grid_corners(vol.dims[a], size, stride)).collect();
    let mut out = Vec::new();
    for &z in &axes[2] {
        for &y in &axes[1] {
            for &x in &axes[0] {
                let corner = [x, y, z];
                out.push(PatchSample {
                    image: crop(&vol.data, vol.dims, corner, size),
                    labels: None,
                    size,
                    modality: vol.modality,
                    source_id: source_id.to_string(),
                    corner,
                });
            }
        }
    }
    Ok(out)
}
