//! Overlap and boundary scores, region volumetry and lesion/atlas overlap.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// Surface tolerance used when none is given, one 2 mm voxel.
pub const DEFAULT_TOLERANCE_MM: f64 = 2.0;

/// Predicted and reference binary masks on one grid (x fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub predicted: Vec<bool>,
    pub reference: Vec<bool>,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
}

impl MaskPair {
    pub fn new(predicted: Vec<bool>, reference: Vec<bool>, dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if predicted.len() != n || reference.len() != n {
            return Err(Error::shape("mask pair", format!("dims {:?} need {n} voxels, got {} and {}", dims, predicted.len(), reference.len())));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("spacing {:?} must be positive", spacing_mm)));
        }
        Ok(Self { predicted, reference, dims, spacing_mm })
    }

    /// Masks of one label in a prediction and a reference labelling.
    pub fn from_labels(pred: &LabelVolume, reference: &LabelVolume, label: u16) -> Result<Self> {
        if !pred.same_grid(reference.dims, reference.spacing_mm) {
            return Err(Error::shape("mask pair", format!("grids {:?} and {:?} differ", pred.dims, reference.dims)));
        }
        Self::new(pred.mask(label), reference.mask(label), pred.dims, pred.spacing_mm)
    }

    pub fn swapped(&self) -> Self {
        Self { predicted: self.reference.clone(), reference: self.predicted.clone(), ..*self }
    }
}

/// `2 |A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pair: &MaskPair) -> f64 {
    let (mut a, mut b, mut ab) = (0usize, 0usize, 0usize);
    for (&p, &r) in pair.predicted.iter().zip(&pair.reference) {
        a += p as usize;
        b += r as usize;
        ab += (p && r) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * ab as f64 / (a + b) as f64
    }
}

/// Mask voxels with a face neighbour outside the mask or outside the grid.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !mask[i] {
                    continue;
                }
                out[i] = x == 0
                    || x + 1 == nx
                    || y == 0
                    || y + 1 == ny
                    || z == 0
                    || z + 1 == nz
                    || !mask[i - 1]
                    || !mask[i + 1]
                    || !mask[i - nx]
                    || !mask[i + nx]
                    || !mask[i - nx * ny]
                    || !mask[i + nx * ny];
            }
        }
    }
    out
}

/// Lower envelope of parabolas: `d[q] = min_p f[p] + (w (q - p))^2`.
fn envelope_1d(f: &[f64], w: f64, d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let w2 = w * w;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64)) / (2.0 * w2 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = w * (q as f64 - p as f64);
        d[q] = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// `true` voxel of `seeds`; infinite when there are none.
pub fn squared_distance_transform(seeds: &[bool], dims: [usize; 3], spacing_mm: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut f: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let longest = nx.max(ny).max(nz);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut zb) = (vec![0usize; longest], vec![0.0; longest + 1]);
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..f.len()).filter(|&i| (i / stride) % n == 0).collect();
        for start in others {
            for q in 0..n {
                line[q] = f[start + q * stride];
            }
            envelope_1d(&line[..n], spacing_mm[axis], &mut out[..n], &mut v, &mut zb);
            for q in 0..n {
                f[start + q * stride] = out[q];
            }
        }
    }
    f
}

/// Fraction of both boundaries lying within `tolerance_mm` of the other.
pub fn surface_dice(pair: &MaskPair, tolerance_mm: f64) -> Result<f64> {
    if !(tolerance_mm >= 0.0) {
        return Err(Error::Domain { op: "surface_dice", detail: format!("tolerance {tolerance_mm} must be >= 0") });
    }
    let ba = boundary(&pair.predicted, pair.dims);
    let bb = boundary(&pair.reference, pair.dims);
    let (na, nb) = (ba.iter().filter(|&&v| v).count(), bb.iter().filter(|&&v| v).count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    if na == 0 || nb == 0 {
        return Ok(0.0);
    }
    let da = squared_distance_transform(&ba, pair.dims, pair.spacing_mm);
    let db = squared_distance_transform(&bb, pair.dims, pair.spacing_mm);
    let t2 = tolerance_mm * tolerance_mm;
    let hits_a = ba.iter().zip(&db).filter(|(&on, &d)| on && d <= t2).count();
    let hits_b = bb.iter().zip(&da).filter(|(&on, &d)| on && d <= t2).count();
    Ok((hits_a + hits_b) as f64 / (na + nb) as f64)
}

/// Physical volume of one label, mm^3.
pub fn region_volume(labels: &LabelVolume, region: u16) -> Result<f64> {
    if region as usize >= labels.category_table.len() {
        return Err(Error::IndexOutOfRange { what: "region", index: region as usize, limit: labels.category_table.len() });
    }
    let n = labels.labels.iter().filter(|&&l| l == region).count();
    Ok(n as f64 * labels.voxel_volume_mm3())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub region: String,
    pub overlap_mm3: f64,
    pub region_total_mm3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub lesion: String,
    pub rows: Vec<OverlapRow>,
    /// Identifiers of the inputs the report was built from.
    pub sources: Vec<String>,
}

impl OverlapReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["region", "overlap_mm3", "region_total_mm3"])?;
        for r in &self.rows {
            out.write_record([r.region.clone(), r.overlap_mm3.to_string(), r.region_total_mm3.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("csv", e))
    }

    /// `<stem>.csv` holds the rows, `<stem>.json` the whole report.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let csv_path = stem.with_extension("csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(f)?;
        let json_path = stem.with_extension("json");
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json_path, e))
    }
}

/// Splits the lesion (every nonzero voxel of `lesion`) over the atlas
/// regions it touches, largest overlap first.
pub fn overlap_report(lesion: &LabelVolume, atlas: &LabelVolume) -> Result<OverlapReport> {
    if !lesion.same_grid(atlas.dims, atlas.spacing_mm) {
        return Err(Error::shape(
            "overlap_report",
            format!("lesion grid {:?} @ {:?} vs atlas {:?} @ {:?}", lesion.dims, lesion.spacing_mm, atlas.dims, atlas.spacing_mm),
        ));
    }
    let regions = atlas.category_table.len();
    let mut overlap = vec![0usize; regions];
    let mut total = vec![0usize; regions];
    for (&l, &a) in lesion.labels.iter().zip(&atlas.labels) {
        total[a as usize] += 1;
        if l != 0 {
            overlap[a as usize] += 1;
        }
    }
    let vox = atlas.voxel_volume_mm3();
    let mut rows: Vec<(usize, usize)> = (1..regions).filter(|&r| overlap[r] > 0).map(|r| (r, overlap[r])).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(OverlapReport {
        lesion: lesion.category_table.get(1).cloned().unwrap_or_else(|| "lesion".into()),
        rows: rows
            .into_iter()
            .map(|(r, o)| OverlapRow { region: atlas.category_table[r].clone(), overlap_mm3: o as f64 * vox, region_total_mm3: total[r] as f64 * vox })
            .collect(),
        sources: Vec::new(),
    })
}
