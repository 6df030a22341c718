use super::{LabelVolume, Volume};
use crate::error::{Error, Result};

pub const DEFAULT_SPACING_MM: f64 = 2.0;

fn target_dims(dims: [usize; 3], spacing: [f64; 3], target: f64) -> Result<[usize; 3]> {
    if !(target > 0.0) {
        return Err(Error::Domain { op: "resample", detail: format!("target spacing {target} must be positive") });
    }
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = (dims[a] as f64 * spacing[a] / target).round() as usize;
        if out[a] == 0 {
            return Err(Error::Data(format!("resampling {:?} at {:?} mm to {target} mm leaves an empty axis", dims, spacing)));
        }
    }
    Ok(out)
}

/// Continuous source index of output voxel `j`, voxel centres aligned.
#[inline]
fn source_coord(j: usize, ratio: f64) -> f64 {
    (j as f64 + 0.5) * ratio - 0.5
}

/// Linear taps `(i0, i1, w1)` along one axis, clamped at the edges.
fn axis_taps(n_in: usize, n_out: usize, ratio: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|j| {
            let s = source_coord(j, ratio).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling to isotropic `target_mm` spacing.
pub fn resample_isotropic(vol: &Volume, target_mm: f64) -> Result<Volume> {
    let new = target_dims(vol.dims, vol.spacing_mm, target_mm)?;
    let taps: Vec<_> = (0..3).map(|a| axis_taps(vol.dims[a], new[a], target_mm / vol.spacing_mm[a])).collect();
    let [nx, ny, _] = vol.dims;
    let src = |x: usize, y: usize, z: usize| vol.data[x + nx * (y + ny * z)] as f64;
    let mut data = Vec::with_capacity(new.iter().product());
    for &(z0, z1, wz) in &taps[2] {
        for &(y0, y1, wy) in &taps[1] {
            for &(x0, x1, wx) in &taps[0] {
                let lerp = |a: f64, b: f64, w: f64| a + (b - a) * w;
                let plane = |z| lerp(lerp(src(x0, y0, z), src(x1, y0, z), wx), lerp(src(x0, y1, z), src(x1, y1, z), wx), wy);
                data.push(lerp(plane(z0), plane(z1), wz) as f32);
            }
        }
    }
    let mut out = Volume::new(data, new, [target_mm; 3], vol.modality)?;
    out.pet_meta = vol.pet_meta;
    out.normalized = vol.normalized;
    Ok(out)
}

/// Nearest-neighbour resampling of a label map.
pub fn resample_labels(labels: &LabelVolume, target_mm: f64) -> Result<LabelVolume> {
    let new = target_dims(labels.dims, labels.spacing_mm, target_mm)?;
    let nearest: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let ratio = target_mm / labels.spacing_mm[a];
            (0..new[a]).map(|j| (source_coord(j, ratio).round().max(0.0) as usize).min(labels.dims[a] - 1)).collect()
        })
        .collect();
    let [nx, ny, _] = labels.dims;
    let mut out = Vec::with_capacity(new.iter().product());
    for &z in &nearest[2] {
        for &y in &nearest[1] {
            for &x in &nearest[0] {
                out.push(labels.labels[x + nx * (y + ny * z)]);
            }
        }
    }
    LabelVolume::new(out, new, [target_mm; 3], labels.category_table.clone())
}
