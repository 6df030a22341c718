//! `cases.json`: the category table plus one entry per image, with paths
//! relative to the index file.

use std::path::{Path, PathBuf};

use mpum::network::Strategy;
use mpum::train::{load_checkpoint, save_checkpoint, Case, ModelSet, Trainer};
use mpum::volume::{normalize_modality, read_labels, read_volume, LabelVolume, Volume};
use mpum::{Error, Modality, Result};
use serde::{Deserialize, Serialize};

pub const INDEX_FILE: &str = "cases.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub modality: Modality,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    /// Foreground categories; label `i` is `categories[i - 1]`.
    pub categories: Vec<String>,
    pub cases: Vec<CaseEntry>,
}

/// Accepts the index file itself or the directory holding it.
pub fn index_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(INDEX_FILE)
    } else {
        p.to_path_buf()
    }
}

impl Dataset {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let path = index_path(path);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        let ds: Dataset = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((ds, base))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(INDEX_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::Io { path, source: e })
    }

    pub fn table(&self) -> Vec<String> {
        LabelVolume::table_with_background(&self.categories)
    }
}

/// Reads a volume and normalises it unless the file says it already is.
pub fn load_normalized(path: &Path, modality: Option<Modality>) -> Result<Volume> {
    let vol = read_volume(path, modality)?;
    if vol.normalized {
        Ok(vol)
    } else {
        normalize_modality(&vol)
    }
}

/// Loads every labelled case of the index at `path`.
pub fn load_cases(path: &Path) -> Result<(Vec<String>, Vec<Case>)> {
    let (ds, base) = Dataset::load(path)?;
    let table = ds.table();
    let mut cases = Vec::with_capacity(ds.cases.len());
    for e in &ds.cases {
        let labels = e.labels.as_ref().ok_or_else(|| Error::Data(format!("case {} has no label map", e.id)))?;
        let vol = load_normalized(&base.join(&e.image), Some(e.modality))?;
        let lab = read_labels(&base.join(labels), Some(table.clone()))?;
        cases.push(Case::new(e.id.clone(), vol, lab)?);
    }
    if cases.is_empty() {
        return Err(Error::Data(format!("{} lists no cases", path.display())));
    }
    Ok((ds.categories, cases))
}

pub fn modalities_of(cases: &[Case]) -> Vec<Modality> {
    let mut m: Vec<Modality> = cases.iter().map(Case::modality).collect();
    m.sort();
    m.dedup();
    m
}

const MODEL_INDEX: &str = "models.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelIndex {
    strategy: Strategy,
    models: Vec<String>,
}

/// Writes `dir/models/<i>/` checkpoints and the `dir/models.json` index.
pub fn save_models(set: &ModelSet, dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for (i, t) in set.trainers.iter().enumerate() {
        let rel = format!("models/{i}");
        save_checkpoint(t, &dir.join(&rel))?;
        names.push(rel);
    }
    let index = ModelIndex { strategy: set.strategy, models: names.clone() };
    let path = dir.join(MODEL_INDEX);
    std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::Io { path, source: e })?;
    names.push(MODEL_INDEX.into());
    Ok(names)
}

/// Accepts a run directory, its model index file, or one checkpoint directory.
pub fn load_models(path: &Path) -> Result<ModelSet> {
    let (path, index) = if path.is_file() { (path.parent().unwrap_or(Path::new(".")), path.to_path_buf()) } else { (path, path.join(MODEL_INDEX)) };
    if index.exists() {
        let text = std::fs::read_to_string(&index).map_err(|e| Error::Io { path: index.clone(), source: e })?;
        let idx: ModelIndex = serde_json::from_str(&text)?;
        let trainers = idx.models.iter().map(|m| load_checkpoint(&path.join(m))).collect::<Result<Vec<_>>>()?;
        return Ok(ModelSet { strategy: idx.strategy, trainers });
    }
    let t = load_checkpoint(path)?;
    Ok(ModelSet { strategy: t.model.config.strategy, trainers: vec![t] })
}

pub fn single_model(path: &Path) -> Result<Trainer> {
    let mut set = load_models(path)?;
    if set.trainers.len() != 1 {
        return Err(Error::Config(format!("{} holds {} models; pass one checkpoint directory", path.display(), set.trainers.len())));
    }
    Ok(set.trainers.remove(0))
}
