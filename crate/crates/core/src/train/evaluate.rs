use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Case;
use crate::error::{Error, Result};
use crate::metrics::{dice, surface_dice, MaskPair};
use crate::modality::Modality;
use crate::network::{Model, Predictor};
use crate::volume::LabelVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub case: String,
    pub modality: Modality,
    pub category: String,
    pub dice: f64,
    pub surface_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub modality: Modality,
    pub category: String,
    pub cases: usize,
    pub mean_dice: f64,
    pub mean_surface_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub tolerance_mm: f64,
    pub per_case: Vec<EvalRow>,
    /// One row per (modality, category), modalities in first-seen order.
    pub summary: Vec<SummaryRow>,
}

impl EvalTable {
    pub fn mean_dice(&self) -> f64 {
        self.summary.iter().map(|r| r.mean_dice).sum::<f64>() / self.summary.len().max(1) as f64
    }

    pub fn mean_dice_for(&self, m: Modality) -> Option<f64> {
        let rows: Vec<f64> = self.summary.iter().filter(|r| r.modality == m).map(|r| r.mean_dice).collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }

    pub fn write_summary_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["modality", "category", "cases", "mean_dice", "mean_surface_dice", "tolerance_mm"])?;
        for r in &self.summary {
            out.write_record([
                r.modality.to_string(),
                r.category.clone(),
                r.cases.to_string(),
                r.mean_dice.to_string(),
                r.mean_surface_dice.to_string(),
                self.tolerance_mm.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("summary", e))
    }

    pub fn write_cases_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["case", "modality", "category", "dice", "surface_dice"])?;
        for r in &self.per_case {
            out.write_record([r.case.clone(), r.modality.to_string(), r.category.clone(), r.dice.to_string(), r.surface_dice.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("cases", e))
    }
}

/// Dice and surface Dice of every foreground category on every case.
pub fn evaluate(predictor: &dyn Predictor, cases: &[Case], categories: &[String], tolerance_mm: f64) -> Result<EvalTable> {
    let table = LabelVolume::table_with_background(categories);
    let mut per_case = Vec::new();
    let mut order: Vec<Modality> = Vec::new();
    for case in cases {
        if case.labels.category_table != table {
            return Err(Error::Data(format!("case {}: category table {:?} does not match {:?}", case.id, case.labels.category_table, table)));
        }
        let pred = predictor.predict(&case.volume, case.modality())?;
        if pred.dims != case.labels.dims {
            return Err(Error::shape("evaluate", format!("prediction {:?} vs labels {:?}", pred.dims, case.labels.dims)));
        }
        if !order.contains(&case.modality()) {
            order.push(case.modality());
        }
        for (c, name) in categories.iter().enumerate() {
            let l = (c + 1) as u16;
            let pair = MaskPair::new(pred.mask(l), case.labels.mask(l), case.labels.dims, case.labels.spacing_mm)?;
            per_case.push(EvalRow {
                case: case.id.clone(),
                modality: case.modality(),
                category: name.clone(),
                dice: dice(&pair),
                surface_dice: surface_dice(&pair, tolerance_mm)?,
            });
        }
    }
    let mut summary = Vec::new();
    for &m in &order {
        for name in categories {
            let rows: Vec<&EvalRow> = per_case.iter().filter(|r| r.modality == m && &r.category == name).collect();
            let n = rows.len() as f64;
            summary.push(SummaryRow {
                modality: m,
                category: name.clone(),
                cases: rows.len(),
                mean_dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
                mean_surface_dice: rows.iter().map(|r| r.surface_dice).sum::<f64>() / n,
            });
        }
    }
    Ok(EvalTable { tolerance_mm, per_case, summary })
}

/// Mean foreground Dice of one model over `cases`.
pub fn mean_dice(model: &Model<f32>, cases: &[Case]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for case in cases {
        let pred = model.predict(&case.volume, case.modality())?;
        for c in 1..=model.num_categories() as u16 {
            total += dice(&MaskPair::new(pred.mask(c), case.labels.mask(c), case.labels.dims, case.labels.spacing_mm)?);
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}
