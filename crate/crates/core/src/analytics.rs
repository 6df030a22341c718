//! ROI uptake statistics and correlation-network comparison between cohorts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::volume::{LabelVolume, Volume, SUV_SCALE};

/// Significance threshold used when none is given.
pub const DEFAULT_ALPHA: f64 = 1e-3;

/// Voxel values of a PET volume as body-weight SUV. Normalised volumes are
/// rescaled; raw volumes carrying dose and weight are read as kBq/mL and
/// converted; anything else is taken to hold SUV already.
pub fn suv_values(pet: &Volume) -> Result<Vec<f64>> {
    if pet.modality != Modality::Pet {
        return Err(Error::Data(format!("expected a PET volume, got {}", pet.modality)));
    }
    if pet.normalized {
        return Ok(pet.data.iter().map(|&v| v as f64 * SUV_SCALE).collect());
    }
    match pet.pet_meta {
        Some(meta) => {
            if !(meta.injected_dose_mbq > 0.0 && meta.body_weight_kg > 0.0) {
                return Err(Error::Data("PET dose and weight must be positive".into()));
            }
            let per_kg = meta.injected_dose_mbq / meta.body_weight_kg;
            Ok(pet.data.iter().map(|&v| v as f64 / per_kg).collect())
        }
        None => Ok(pet.data.iter().map(|&v| v as f64).collect()),
    }
}

/// Mean SUV inside label `roi`.
pub fn roi_mean_suv(pet: &Volume, labels: &LabelVolume, roi: u16) -> Result<f64> {
    if !labels.same_grid(pet.dims, pet.spacing_mm) {
        return Err(Error::shape("roi_mean_suv", format!("PET {:?} vs labels {:?}", pet.dims, labels.dims)));
    }
    let name =
        labels.category_table.get(roi as usize).ok_or(Error::IndexOutOfRange { what: "roi", index: roi as usize, limit: labels.category_table.len() })?;
    let suv = suv_values(pet)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (&l, &v) in labels.labels.iter().zip(&suv) {
        if l == roi {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion(name.clone()));
    }
    Ok(sum / n as f64)
}

fn centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

/// Sample Pearson correlation, clamped to `[-1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Domain { op: "pearson", detail: format!("need at least 3 samples, got {}", x.len()) });
    }
    let (a, b) = (centered(x), centered(y));
    let sab: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
    let saa: f64 = a.iter().map(|p| p * p).sum();
    let sbb: f64 = b.iter().map(|q| q * q).sum();
    if saa == 0.0 {
        return Err(Error::ZeroVariance("x".into()));
    }
    if sbb == 0.0 {
        return Err(Error::ZeroVariance("y".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `2 (1 - Phi(|z|))`, evaluated without cancellation.
pub fn two_tailed_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherResult {
    pub z_control: f64,
    pub z_patient: f64,
    pub z_score: f64,
    pub p: f64,
}

/// Compares two independent correlations through the Fisher transform.
pub fn fisher_compare(r_c: f64, n_c: usize, r_p: f64, n_p: usize) -> Result<FisherResult> {
    for (r, n) in [(r_c, n_c), (r_p, n_p)] {
        if n <= 3 {
            return Err(Error::Domain { op: "fisher_compare", detail: format!("cohort size {n} must exceed 3") });
        }
        if !(r.abs() < 1.0) {
            return Err(Error::Domain { op: "fisher_compare", detail: format!("|r| = {} must be below 1", r.abs()) });
        }
    }
    let (z_control, z_patient) = (r_c.atanh(), r_p.atanh());
    let se = (1.0 / (n_c - 3) as f64 + 1.0 / (n_p - 3) as f64).sqrt();
    let z_score = (z_control - z_patient) / se;
    Ok(FisherResult { z_control, z_patient, z_score, p: two_tailed_p(z_score) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiClass {
    Brain,
    Body,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairClass {
    #[serde(rename = "brain-brain")]
    BrainBrain,
    #[serde(rename = "brain-body")]
    BrainBody,
    #[serde(rename = "body-body")]
    BodyBody,
}

impl PairClass {
    pub fn of(a: RoiClass, b: RoiClass) -> Self {
        match (a, b) {
            (RoiClass::Brain, RoiClass::Brain) => PairClass::BrainBrain,
            (RoiClass::Body, RoiClass::Body) => PairClass::BodyBody,
            _ => PairClass::BrainBody,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairClass::BrainBrain => "brain-brain",
            PairClass::BrainBody => "brain-body",
            PairClass::BodyBody => "body-body",
        }
    }
}

impl std::str::FromStr for PairClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brain-brain" => Ok(PairClass::BrainBrain),
            "brain-body" | "body-brain" => Ok(PairClass::BrainBody),
            "body-body" => Ok(PairClass::BodyBody),
            _ => Err(Error::Config(format!("unknown pair class {s}"))),
        }
    }
}

/// ROI name to class.
pub type RoiClassMap = BTreeMap<String, RoiClass>;

pub fn load_class_map(path: &Path) -> Result<RoiClassMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub brain_brain: usize,
    pub brain_body: usize,
    pub body_body: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiPair {
    pub a: String,
    pub b: String,
    pub class: PairClass,
}

/// Every unordered pair of retained ROIs, names in lexicographic order.
pub fn enumerate_pairs(classes: &RoiClassMap, exclusions: &[String]) -> Result<(Vec<RoiPair>, PairCounts)> {
    for e in exclusions {
        if !classes.contains_key(e) {
            return Err(Error::UnknownCategory(e.clone()));
        }
    }
    let kept: Vec<(&String, RoiClass)> = classes.iter().filter(|(n, _)| !exclusions.contains(n)).map(|(n, &c)| (n, c)).collect();
    let mut pairs = Vec::with_capacity(kept.len() * kept.len().saturating_sub(1) / 2);
    let mut counts = PairCounts::default();
    for (i, (a, ca)) in kept.iter().enumerate() {
        for (b, cb) in &kept[i + 1..] {
            let class = PairClass::of(*ca, *cb);
            match class {
                PairClass::BrainBrain => counts.brain_brain += 1,
                PairClass::BrainBody => counts.brain_body += 1,
                PairClass::BodyBody => counts.body_body += 1,
            }
            pairs.push(RoiPair { a: (*a).clone(), b: (*b).clone(), class });
        }
    }
    counts.total = pairs.len();
    Ok((pairs, counts))
}

/// Per-subject mean SUV of one cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSeries {
    pub cohort: String,
    pub subjects: Vec<String>,
    pub rois: Vec<String>,
    /// ROI-major: `values[r][s]` for ROI `r`, subject `s`.
    pub values: Vec<Vec<f64>>,
}

impl RoiSeries {
    pub fn new(cohort: impl Into<String>, subjects: Vec<String>, rois: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let cohort = cohort.into();
        if values.len() != rois.len() || values.iter().any(|v| v.len() != subjects.len()) {
            return Err(Error::shape("roi series", format!("{} ROIs x {} subjects", rois.len(), subjects.len())));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("cohort {cohort} has non-finite uptake values")));
        }
        let mut sorted = rois.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateCategory(w[0].clone()));
        }
        Ok(Self { cohort, subjects, rois, values })
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn series(&self, roi: &str) -> Result<&[f64]> {
        self.rois.iter().position(|r| r == roi).map(|i| self.values[i].as_slice()).ok_or_else(|| Error::UnknownCategory(roi.to_string()))
    }
}

/// Splits a `subject_id, cohort, <roi>...` table into control and patient series.
pub fn read_cohort_csv(path: &Path) -> Result<(RoiSeries, RoiSeries)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "subject_id" || &header[1] != "cohort" {
        return Err(Error::Data("cohort CSV must start with subject_id,cohort and one column per ROI".into()));
    }
    let rois: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut groups: BTreeMap<String, (Vec<String>, Vec<Vec<f64>>)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let cohort = rec[1].to_string();
        if cohort != "control" && cohort != "patient" {
            return Err(Error::Data(format!("unknown cohort {cohort}")));
        }
        let entry = groups.entry(cohort).or_insert_with(|| (Vec::new(), vec![Vec::new(); rois.len()]));
        entry.0.push(rec[0].to_string());
        for (r, field) in rec.iter().skip(2).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Data(format!("subject {}: bad value {field:?}", &rec[0])))?;
            entry.1[r].push(v);
        }
    }
    let mut take = |name: &str| -> Result<RoiSeries> {
        let (subjects, values) = groups.remove(name).ok_or_else(|| Error::Data(format!("no {name} subjects")))?;
        RoiSeries::new(name, subjects, rois.clone(), values)
    };
    Ok((take("control")?, take("patient")?))
}

/// Reads one cohort from a `subject_id, <roi>...` table. A `cohort` second
/// column is allowed, in which case only rows tagged `cohort` are kept.
pub fn read_series_csv(path: &Path, cohort: &str) -> Result<RoiSeries> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.len() < 2 || &header[0] != "subject_id" {
        return Err(Error::Data(format!("{}: first column must be subject_id", path.display())));
    }
    let tagged = &header[1] == "cohort";
    let skip = if tagged { 2 } else { 1 };
    let rois: Vec<String> = header.iter().skip(skip).map(str::to_string).collect();
    let mut subjects = Vec::new();
    let mut values = vec![Vec::new(); rois.len()];
    for rec in rdr.records() {
        let rec = rec?;
        if tagged && &rec[1] != cohort {
            continue;
        }
        subjects.push(rec[0].to_string());
        for (r, field) in rec.iter().skip(skip).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Data(format!("subject {}: bad value {field:?}", &rec[0])))?;
            values[r].push(v);
        }
    }
    if subjects.is_empty() {
        return Err(Error::Data(format!("{}: no {cohort} subjects", path.display())));
    }
    RoiSeries::new(cohort, subjects, rois, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub roi_a: String,
    pub roi_b: String,
    pub class: PairClass,
    pub r_control: f64,
    pub r_patient: f64,
    pub z_control: f64,
    pub z_patient: f64,
    pub z_score: f64,
    pub p: f64,
    pub p_bonferroni: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub roi_a: String,
    pub roi_b: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReport {
    pub alpha: f64,
    pub counts: PairCounts,
    /// Ascending p, ties in enumeration order.
    pub rows: Vec<PairResult>,
    pub skipped: Vec<SkippedPair>,
    /// Significant pairs each ROI takes part in, most involved first.
    pub roi_tallies: Vec<(String, usize)>,
}

impl PairwiseReport {
    pub fn significant(&self) -> impl Iterator<Item = &PairResult> {
        self.rows.iter().filter(|r| r.significant)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["roi_a", "roi_b", "class", "r_control", "r_patient", "z", "p", "p_bonferroni", &format!("significant({})", self.alpha)])?;
        for r in &self.rows {
            out.write_record([
                r.roi_a.clone(),
                r.roi_b.clone(),
                r.class.as_str().to_string(),
                r.r_control.to_string(),
                r.r_patient.to_string(),
                r.z_score.to_string(),
                r.p.to_string(),
                r.p_bonferroni.to_string(),
                r.significant.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("pairs", e))
    }
}

/// Options of [`pairwise_analysis`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseOptions {
    #[serde(default)]
    pub exclusions: Vec<String>,
    /// Pair classes to test; empty means all.
    #[serde(default)]
    pub classes: Vec<PairClass>,
}

/// Fisher comparison of every enumerated ROI pair between the cohorts.
pub fn pairwise_analysis(control: &RoiSeries, patient: &RoiSeries, classes: &RoiClassMap, alpha: f64, opts: &PairwiseOptions) -> Result<PairwiseReport> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha {alpha} must lie in (0, 1]")));
    }
    let mut a = control.rois.clone();
    let mut b = patient.rois.clone();
    a.sort();
    b.sort();
    if a != b {
        return Err(Error::Data("control and patient cohorts cover different ROIs".into()));
    }
    let known: Vec<&String> = classes.keys().collect();
    if a.iter().collect::<Vec<_>>() != known {
        return Err(Error::Data("ROI class map does not match the cohort ROIs".into()));
    }
    let (pairs, mut counts) = enumerate_pairs(classes, &opts.exclusions)?;
    let pairs: Vec<RoiPair> = pairs.into_iter().filter(|p| opts.classes.is_empty() || opts.classes.contains(&p.class)).collect();
    if !opts.classes.is_empty() {
        counts = PairCounts {
            brain_brain: pairs.iter().filter(|p| p.class == PairClass::BrainBrain).count(),
            brain_body: pairs.iter().filter(|p| p.class == PairClass::BrainBody).count(),
            body_body: pairs.iter().filter(|p| p.class == PairClass::BodyBody).count(),
            total: pairs.len(),
        };
    }

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for pair in &pairs {
        let rc = pearson(control.series(&pair.a)?, control.series(&pair.b)?);
        let rp = pearson(patient.series(&pair.a)?, patient.series(&pair.b)?);
        let fisher = match (rc, rp) {
            (Ok(rc), Ok(rp)) => fisher_compare(rc, control.n(), rp, patient.n()).map(|f| (rc, rp, f)),
            (Err(e), _) | (_, Err(e)) => Err(e),
        };
        match fisher {
            Ok((rc, rp, f)) => rows.push(PairResult {
                roi_a: pair.a.clone(),
                roi_b: pair.b.clone(),
                class: pair.class,
                r_control: rc,
                r_patient: rp,
                z_control: f.z_control,
                z_patient: f.z_patient,
                z_score: f.z_score,
                p: f.p,
                p_bonferroni: 0.0,
                significant: f.p < alpha,
            }),
            Err(e @ (Error::ZeroVariance(_) | Error::Domain { .. })) => {
                log::warn!("skipping pair {} / {}: {e}", pair.a, pair.b);
                skipped.push(SkippedPair { roi_a: pair.a.clone(), roi_b: pair.b.clone(), reason: e.to_string() });
            }
            Err(e) => return Err(e),
        }
    }
    let tests = rows.len() as f64;
    for r in &mut rows {
        r.p_bonferroni = (r.p * tests).min(1.0);
    }
    rows.sort_by(|x, y| x.p.total_cmp(&y.p));

    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.significant) {
        *tally.entry(&r.roi_a).or_default() += 1;
        *tally.entry(&r.roi_b).or_default() += 1;
    }
    let mut roi_tallies: Vec<(String, usize)> = tally.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    roi_tallies.sort_by(|x, y| y.1.cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    Ok(PairwiseReport { alpha, counts, rows, skipped, roi_tallies })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    /// `(mean_patient - mean_control) / se`.
    pub statistic: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Student-t tail `P(|T| >= |t|)` with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Welch two-sample test of one ROI between cohorts.
pub fn welch_t_test(control: &[f64], patient: &[f64]) -> Result<WelchResult> {
    if control.len() < 2 || patient.len() < 2 {
        return Err(Error::Domain { op: "welch_t_test", detail: "each cohort needs at least 2 subjects".into() });
    }
    let (mc, vc) = mean_var(control);
    let (mp, vp) = mean_var(patient);
    let (nc, np) = (control.len() as f64, patient.len() as f64);
    let (ac, ap) = (vc / nc, vp / np);
    if ac + ap == 0.0 {
        return Err(Error::ZeroVariance("both cohorts".into()));
    }
    let statistic = (mp - mc) / (ac + ap).sqrt();
    let df = (ac + ap).powi(2) / (ac * ac / (nc - 1.0) + ap * ap / (np - 1.0));
    Ok(WelchResult { statistic, df, p: student_t_two_tailed(statistic, df) })
}

pub fn single_organ_test(control: &RoiSeries, patient: &RoiSeries, roi: &str) -> Result<WelchResult> {
    welch_t_test(control.series(roi)?, patient.series(roi)?)
}
