//! `<stem>.raw` (little-endian float32) plus a `<stem>.json` sidecar.

use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{LabelVolume, PetMeta, Volume};
use crate::error::{Error, Result};
use crate::modality::Modality;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    modality: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pet_meta: Option<PetMeta>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    normalized: bool,
    /// Present for label maps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("raw"), stem.with_extension("json"))
}

fn write_parts(stem: &Path, data: &[f32], sidecar: &Sidecar) -> Result<()> {
    let (raw, json) = paths(stem);
    let mut bytes = vec![0u8; data.len() * 4];
    LittleEndian::write_f32_into(data, &mut bytes);
    std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    std::fs::write(&json, serde_json::to_string_pretty(sidecar)?).map_err(|e| Error::io(&json, e))
}

fn read_parts(stem: &Path) -> Result<(Vec<f32>, Sidecar)> {
    let (raw, json) = paths(stem);
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Truncated { expected: n * 4, found: bytes.len() });
    }
    let mut data = vec![0f32; n];
    LittleEndian::read_f32_into(&bytes, &mut data);
    Ok((data, sidecar))
}

pub fn write_raw(vol: &Volume, stem: &Path) -> Result<()> {
    let sidecar = Sidecar {
        shape: vol.dims,
        spacing_mm: vol.spacing_mm,
        modality: Some(vol.modality),
        pet_meta: vol.pet_meta,
        normalized: vol.normalized,
        categories: None,
    };
    write_parts(stem, &vol.data, &sidecar)
}

pub fn read_raw(stem: &Path) -> Result<Volume> {
    let (data, sc) = read_parts(stem)?;
    let modality = sc.modality.ok_or_else(|| Error::Data(format!("{}: sidecar has no modality", stem.display())))?;
    let mut vol = Volume::new(data, sc.shape, sc.spacing_mm, modality)?;
    vol.pet_meta = sc.pet_meta;
    vol.normalized = sc.normalized;
    Ok(vol)
}

pub fn write_raw_labels(labels: &LabelVolume, stem: &Path) -> Result<()> {
    let data: Vec<f32> = labels.labels.iter().map(|&l| l as f32).collect();
    let sidecar = Sidecar {
        shape: labels.dims,
        spacing_mm: labels.spacing_mm,
        modality: None,
        pet_meta: None,
        normalized: false,
        categories: Some(labels.category_table.clone()),
    };
    write_parts(stem, &data, &sidecar)
}

pub fn read_raw_labels(stem: &Path) -> Result<LabelVolume> {
    let (data, sc) = read_parts(stem)?;
    let table = sc.categories.ok_or_else(|| Error::Data(format!("{}: sidecar has no category table", stem.display())))?;
    let labels = data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u16::MAX as f32 {
                Ok(v as u16)
            } else {
                Err(Error::Data(format!("label value {v} is not a category index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelVolume::new(labels, sc.shape, sc.spacing_mm, table)
}
