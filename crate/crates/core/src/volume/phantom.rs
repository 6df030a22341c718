//! Synthetic multi-modality phantoms: one shared ellipsoid geometry, with
//! per-modality intensities that deliberately disagree (a category bright in
//! one modality is dark in another, and intensities are reused by different
//! categories across modalities). Volumes come out in raw scanner units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelVolume, PetMeta, Volume};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::volume::normalize::{CT_WINDOW, MR_SCALE, SUV_SCALE};

/// Normalised background intensity, identical in every modality.
pub const BACKGROUND_LEVEL: f32 = 0.30;
/// Normalised lesion intensity in CT, MR and PET.
pub const LESION_LEVELS: [f32; 3] = [0.78, 0.45, 0.78];
const NOISE_STD: f64 = 0.03;
const TEXTURE_AMP: f64 = 0.04;
const SPACING_MM: f64 = 2.0;
const PET_META: PetMeta = PetMeta { injected_dose_mbq: 370.0, body_weight_kg: 74.0 };
const MAX_TRIES: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volumes: Vec<Volume>,
    pub labels: LabelVolume,
}

impl Phantom {
    pub fn volume(&self, m: Modality) -> Option<&Volume> {
        self.volumes.iter().find(|v| v.modality == m)
    }
}

fn modality_slot(m: Modality) -> Result<usize> {
    match m {
        Modality::Ct => Ok(0),
        Modality::Mr => Ok(1),
        Modality::Pet => Ok(2),
        Modality::Shared => Err(Error::UnknownModality("SHARED has no phantom intensities".into())),
    }
}

/// Normalised intensity of each category (index 0 = category 1) under `m`.
/// Levels form a pool of one dark and several bright values; each modality
/// rotates the pool by one, so categories swap intensities between modalities.
pub fn category_levels(num_categories: usize, m: Modality) -> Result<Vec<f32>> {
    let k = num_categories.max(2);
    let pool: Vec<f32> = (0..k).map(|i| if i == 0 { 0.05 } else { 0.60 + 0.35 * (i - 1) as f32 / (k - 2).max(1) as f32 }).collect();
    let shift = modality_slot(m)?;
    Ok((0..num_categories).map(|c| pool[(c + shift) % k]).collect())
}

fn to_raw(m: Modality, v: f64) -> f32 {
    match m {
        Modality::Ct => (v * (CT_WINDOW.1 - CT_WINDOW.0) as f64 + CT_WINDOW.0 as f64) as f32,
        Modality::Mr => (v * MR_SCALE as f64) as f32,
        _ => (v * SUV_SCALE * PET_META.injected_dose_mbq / PET_META.body_weight_kg) as f32,
    }
}

struct Ellipsoid {
    centre: [f64; 3],
    axes: [f64; 3],
    rot: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn random(size: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let axes = [0; 3].map(|_| rng.gen_range(lo..hi) * size as f64);
        let r = axes.iter().cloned().fold(0.0, f64::max);
        let centre = [0; 3].map(|_| rng.gen_range(r + 1.0..size as f64 - r - 1.0));
        // random rotation from a unit quaternion
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut q = [0.0f64; 4].map(|_| n.sample(rng));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.iter_mut().for_each(|v| *v /= norm);
        let [w, x, y, z] = q;
        let rot = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Self { centre, axes, rot }
    }

    /// Normalised radius of a voxel centre (`<= 1` inside).
    fn radius(&self, p: [usize; 3]) -> f64 {
        let d = [0, 1, 2].map(|a| p[a] as f64 - self.centre[a]);
        (0..3)
            .map(|i| {
                let u: f64 = (0..3).map(|j| self.rot[i][j] * d[j]).sum();
                (u / self.axes[i]).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    fn voxels(&self, size: usize, grow: f64) -> Vec<usize> {
        let r = self.axes.iter().cloned().fold(0.0, f64::max) + grow + 1.0;
        let range = |a: usize| {
            let lo = (self.centre[a] - r).floor().max(0.0) as usize;
            let hi = ((self.centre[a] + r).ceil() as usize).min(size - 1);
            lo..=hi
        };
        let mut out = Vec::new();
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    let inside = if grow == 0.0 {
                        self.radius([x, y, z]) <= 1.0
                    } else {
                        self.radius([x, y, z]) <= 1.0 + grow / self.axes.iter().cloned().fold(f64::MAX, f64::min)
                    };
                    if inside {
                        out.push(x + size * (y + size * z));
                    }
                }
            }
        }
        out
    }
}

fn place(labels: &mut [u16], size: usize, label: u16, lo: f64, hi: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    for _ in 0..MAX_TRIES {
        let e = Ellipsoid::random(size, lo, hi, rng);
        // one voxel of clearance around neighbours
        if e.voxels(size, 1.0).iter().any(|&i| labels[i] != 0) {
            continue;
        }
        let vox = e.voxels(size, 0.0);
        if vox.is_empty() {
            continue;
        }
        vox.iter().for_each(|&i| labels[i] = label);
        return Ok(vox);
    }
    Err(Error::Placement(label as usize))
}

fn texture(size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let waves: Vec<([f64; 3], f64)> = (0..3).map(|_| ([0; 3].map(|_| rng.gen_range(-2.0..2.0)), rng.gen_range(0.0..std::f64::consts::TAU))).collect();
    let n = size as f64;
    let mut out = Vec::with_capacity(size * size * size);
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let p = [x as f64, y as f64, z as f64];
                let v: f64 = waves.iter().map(|(f, ph)| (std::f64::consts::TAU * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2]) / n + ph).cos()).sum();
                out.push(TEXTURE_AMP * v / 3.0);
            }
        }
    }
    out
}

fn noise_rng(seed: u64, m: Modality, salt: u64) -> Result<ChaCha8Rng> {
    let slot = modality_slot(m)? as u64;
    Ok(ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(slot + 1 + 8 * salt))))
}

/// Builds a `size^3` phantom at 2 mm spacing with one ellipsoid per category.
pub fn synth_phantom(seed: u64, modalities: &[Modality], size: usize, num_categories: usize) -> Result<Phantom> {
    if size < 16 {
        return Err(Error::Config(format!("phantom size {size} < 16")));
    }
    if num_categories == 0 || num_categories > u16::MAX as usize - 1 {
        return Err(Error::Config("phantom needs at least one category".into()));
    }
    if modalities.is_empty() {
        return Err(Error::Config("phantom needs at least one modality".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size * size;
    let mut labels = vec![0u16; n];
    // shrink as categories are added so they keep fitting
    let shrink = (3.0 / num_categories.max(3) as f64).cbrt();
    for c in 1..=num_categories {
        place(&mut labels, size, c as u16, 0.17 * shrink, 0.26 * shrink, &mut rng)?;
    }
    let tex = texture(size, &mut rng);
    let names: Vec<String> = (1..=num_categories).map(|c| format!("category_{c}")).collect();
    let table = LabelVolume::table_with_background(&names);
    let label_vol = LabelVolume::new(labels, [size; 3], [SPACING_MM; 3], table)?;

    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let mut volumes = Vec::with_capacity(modalities.len());
    for &m in modalities {
        let levels = category_levels(num_categories, m)?;
        let mut nr = noise_rng(seed, m, 0)?;
        let data: Vec<f32> = label_vol
            .labels
            .iter()
            .zip(&tex)
            .map(|(&l, &t)| {
                let base = if l == 0 { BACKGROUND_LEVEL as f64 + t } else { levels[l as usize - 1] as f64 + 0.5 * t };
                to_raw(m, (base + noise.sample(&mut nr)).max(0.0))
            })
            .collect();
        let mut vol = Volume::new(data, [size; 3], [SPACING_MM; 3], m)?;
        if m == Modality::Pet {
            vol.pet_meta = Some(PET_META);
        }
        volumes.push(vol);
    }
    Ok(Phantom { volumes, labels: label_vol })
}

/// Adds a smaller lesion ellipsoid as a new category `name` in background
/// space, repainting every modality.
pub fn add_lesion(phantom: &mut Phantom, seed: u64, name: &str) -> Result<u16> {
    if phantom.labels.category_table.iter().any(|n| n == name) {
        return Err(Error::DuplicateCategory(name.to_string()));
    }
    let size = phantom.labels.dims[0];
    let label = phantom.labels.category_table.len() as u16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1E51);
    let vox = place(&mut phantom.labels.labels, size, label, 0.10, 0.16, &mut rng)?;
    phantom.labels.category_table.push(name.to_string());
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    for vol in &mut phantom.volumes {
        let level = LESION_LEVELS[modality_slot(vol.modality)?] as f64;
        let mut nr = noise_rng(seed, vol.modality, 1)?;
        for &i in &vox {
            vol.data[i] = to_raw(vol.modality, (level + noise.sample(&mut nr)).max(0.0));
        }
    }
    Ok(label)
}
