//! Minimal single-file NIfTI-1 (`.nii`): 3D, little-endian, uint8 / int16 /
//! float32, with slope and intercept scaling.
//!
//! The modality tag and PET dose metadata ride in the 80-byte `descrip`
//! field as `key=value` pairs.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{LabelVolume, PetMeta, Volume};
use crate::error::{Error, Result};
use crate::modality::Modality;

const HEADER: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC: [u8; 4] = *b"n+1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiType {
    U8,
    I16,
    F32,
}

impl NiftiType {
    fn code(self) -> i16 {
        match self {
            NiftiType::U8 => 2,
            NiftiType::I16 => 4,
            NiftiType::F32 => 16,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiType::U8),
            4 => Ok(NiftiType::I16),
            16 => Ok(NiftiType::F32),
            c => Err(Error::UnsupportedDatatype(c)),
        }
    }

    fn bytes(self) -> usize {
        match self {
            NiftiType::U8 => 1,
            NiftiType::I16 => 2,
            NiftiType::F32 => 4,
        }
    }
}

/// Decoded image with scaling already applied.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub data: Vec<f32>,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub datatype: NiftiType,
    pub descrip: String,
}

fn header_err(msg: impl Into<String>) -> Error {
    Error::Header(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER {
        return Err(Error::Truncated { expected: HEADER, found: bytes.len() });
    }
    let mut c = Cursor::new(bytes);
    let sizeof_hdr = c.read_i32::<LE>().unwrap();
    if sizeof_hdr != HEADER as i32 {
        if sizeof_hdr.swap_bytes() == HEADER as i32 {
            return Err(Error::BigEndian);
        }
        return Err(header_err(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    c.set_position(40);
    let mut dim = [0i16; 8];
    for d in &mut dim {
        *d = c.read_i16::<LE>().unwrap();
    }
    if dim[0] < 3 || dim[0] > 7 {
        return Err(header_err(format!("dim[0] = {} (need a 3D image)", dim[0])));
    }
    if dim[4..=(dim[0] as usize)].iter().any(|&d| d > 1) {
        return Err(header_err(format!("only 3D images are supported, got dim {:?}", dim)));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(header_err(format!("non-positive extent in dim {:?}", dim)));
    }
    c.set_position(70);
    let datatype = NiftiType::from_code(c.read_i16::<LE>().unwrap())?;
    c.set_position(76);
    let mut pixdim = [0f32; 8];
    for p in &mut pixdim {
        *p = c.read_f32::<LE>().unwrap();
    }
    let vox_offset = c.read_f32::<LE>().unwrap();
    let slope = c.read_f32::<LE>().unwrap();
    let inter = c.read_f32::<LE>().unwrap();
    if !(vox_offset >= DATA_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(header_err(format!("vox_offset {vox_offset} must be an integer >= 352")));
    }
    let spacing = [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64];
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(header_err(format!("pixdim {:?} must be positive", &pixdim[1..4])));
    }
    let descrip = {
        let raw = &bytes[148..228];
        let end = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
        String::from_utf8_lossy(&raw[..end]).into_owned()
    };

    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let n: usize = dims.iter().product();
    let start = vox_offset as usize;
    let need = start + n * datatype.bytes();
    if bytes.len() < need {
        return Err(Error::Truncated { expected: need, found: bytes.len() });
    }
    let mut c = Cursor::new(&bytes[start..need]);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match datatype {
            NiftiType::U8 => c.read_u8().unwrap() as f32,
            NiftiType::I16 => c.read_i16::<LE>().unwrap() as f32,
            NiftiType::F32 => c.read_f32::<LE>().unwrap(),
        };
        data.push(v);
    }
    // slope 0 means "unscaled" by convention
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "nifti read" });
    }
    Ok(NiftiImage { data, dims, spacing_mm: spacing, datatype, descrip })
}

pub fn encode(img: &NiftiImage) -> Result<Vec<u8>> {
    let n: usize = img.dims.iter().product();
    if img.data.len() != n {
        return Err(Error::shape("nifti write", format!("{} values for dims {:?}", img.data.len(), img.dims)));
    }
    if img.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(header_err(format!("extent out of range: {:?}", img.dims)));
    }
    let mut out = Vec::with_capacity(DATA_OFFSET + n * img.datatype.bytes());
    out.write_i32::<LE>(HEADER as i32).unwrap();
    out.resize(40, 0);
    for d in [3, img.dims[0], img.dims[1], img.dims[2], 1, 1, 1, 1] {
        out.write_i16::<LE>(d as i16).unwrap();
    }
    out.resize(70, 0);
    out.write_i16::<LE>(img.datatype.code()).unwrap();
    out.write_i16::<LE>(8 * img.datatype.bytes() as i16).unwrap();
    out.write_i16::<LE>(0).unwrap();
    for p in [1.0, img.spacing_mm[0] as f32, img.spacing_mm[1] as f32, img.spacing_mm[2] as f32, 1.0, 1.0, 1.0, 1.0] {
        out.write_f32::<LE>(p).unwrap();
    }
    out.write_f32::<LE>(DATA_OFFSET as f32).unwrap();
    out.write_f32::<LE>(1.0).unwrap();
    out.write_f32::<LE>(0.0).unwrap();
    out.resize(123, 0);
    out.write_u8(2).unwrap(); // xyzt_units: mm
    out.resize(148, 0);
    let d = img.descrip.as_bytes();
    out.extend_from_slice(&d[..d.len().min(79)]);
    out.resize(344, 0);
    out.extend_from_slice(&MAGIC);
    out.resize(DATA_OFFSET, 0);
    for &v in &img.data {
        match img.datatype {
            NiftiType::U8 => {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Data(format!("value {v} does not fit uint8")));
                }
                out.write_u8(v as u8).unwrap()
            }
            NiftiType::I16 => {
                if !(i16::MIN as f32..=i16::MAX as f32).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Data(format!("value {v} does not fit int16")));
                }
                out.write_i16::<LE>(v as i16).unwrap()
            }
            NiftiType::F32 => out.write_f32::<LE>(v).unwrap(),
        }
    }
    Ok(out)
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_nifti(img: &NiftiImage, path: &Path) -> Result<()> {
    let bytes = encode(img)?;
    std::fs::File::create(path).and_then(|mut f| f.write_all(&bytes)).map_err(|e| Error::io(path, e))
}

fn describe(vol: &Volume) -> String {
    let mut s = format!("modality={}", vol.modality);
    if let Some(m) = vol.pet_meta {
        s.push_str(&format!(" dose_mbq={} weight_kg={}", m.injected_dose_mbq, m.body_weight_kg));
    }
    if vol.normalized {
        s.push_str(" normalized=1");
    }
    s
}

fn parse_descrip(descrip: &str) -> (Option<Modality>, Option<PetMeta>, bool) {
    let mut modality = None;
    let (mut dose, mut weight, mut normalized) = (None, None, false);
    for kv in descrip.split_whitespace() {
        match kv.split_once('=') {
            Some(("modality", v)) => modality = v.parse().ok(),
            Some(("dose_mbq", v)) => dose = v.parse().ok(),
            Some(("weight_kg", v)) => weight = v.parse().ok(),
            Some(("normalized", v)) => normalized = v == "1",
            _ => {}
        }
    }
    let meta = match (dose, weight) {
        (Some(injected_dose_mbq), Some(body_weight_kg)) => Some(PetMeta { injected_dose_mbq, body_weight_kg }),
        _ => None,
    };
    (modality, meta, normalized)
}

/// Writes a float32 image volume.
pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    let img = NiftiImage { data: vol.data.clone(), dims: vol.dims, spacing_mm: vol.spacing_mm, datatype: NiftiType::F32, descrip: describe(vol) };
    write_nifti(&img, path)
}

/// Reads an image volume. `modality` overrides the tag stored in the file.
pub fn read_volume(path: &Path, modality: Option<Modality>) -> Result<Volume> {
    let img = read_nifti(path)?;
    let (stored, meta, normalized) = parse_descrip(&img.descrip);
    let m = modality.or(stored).ok_or_else(|| Error::Data(format!("{}: no modality tag; pass one explicitly", path.display())))?;
    let mut vol = Volume::new(img.data, img.dims, img.spacing_mm, m)?;
    vol.pet_meta = meta;
    vol.normalized = normalized;
    Ok(vol)
}

/// Writes labels as int16.
pub fn write_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    let img = NiftiImage {
        data: labels.labels.iter().map(|&l| l as f32).collect(),
        dims: labels.dims,
        spacing_mm: labels.spacing_mm,
        datatype: NiftiType::I16,
        descrip: format!("labels={}", labels.category_table.len()),
    };
    write_nifti(&img, path)
}

/// Reads a label map. Without a table, categories are named `label_<i>` up
/// to the largest label present.
pub fn read_labels(path: &Path, category_table: Option<Vec<String>>) -> Result<LabelVolume> {
    let img = read_nifti(path)?;
    let mut labels = Vec::with_capacity(img.data.len());
    for &v in &img.data {
        if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f32 {
            return Err(Error::Data(format!("{}: label value {v} is not a category index", path.display())));
        }
        labels.push(v as u16);
    }
    let table = category_table.unwrap_or_else(|| {
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        std::iter::once("background".to_string()).chain((1..=max).map(|i| format!("label_{i}"))).collect()
    });
    LabelVolume::new(labels, img.dims, img.spacing_mm, table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NiftiImage {
        NiftiImage {
            data: (0..24).map(|i| i as f32 * 0.5 - 3.0).collect(),
            dims: [2, 3, 4],
            spacing_mm: [1.5, 2.0, 2.5],
            datatype: NiftiType::F32,
            descrip: "modality=CT".into(),
        }
    }

    #[test]
    fn round_trip() {
        let img = sample();
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_errors_are_distinct() {
        let good = encode(&sample()).unwrap();
        let mut bad = good.clone();
        bad[344] = b'x';
        assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));
        let mut be = good.clone();
        be[..4].copy_from_slice(&348i32.to_be_bytes());
        assert!(matches!(decode(&be), Err(Error::BigEndian)));
        let mut dt = good.clone();
        dt[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(decode(&dt), Err(Error::UnsupportedDatatype(64))));
        assert!(matches!(decode(&good[..good.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&good[..100]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn slope_and_intercept() {
        let mut img = sample();
        img.datatype = NiftiType::I16;
        img.data = vec![3.0; 24];
        let mut bytes = encode(&img).unwrap();
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        assert!(decode(&bytes).unwrap().data.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn descrip_carries_metadata() {
        let (m, meta, norm) = parse_descrip("modality=PET dose_mbq=370 weight_kg=74");
        assert_eq!(m, Some(Modality::Pet));
        assert_eq!(meta, Some(PetMeta { injected_dose_mbq: 370.0, body_weight_kg: 74.0 }));
        assert!(!norm);
    }
}
