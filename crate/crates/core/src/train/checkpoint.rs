use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{Adam, HistoryRow, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: u64,
    /// Per-step streams are derived from the seed and the step index.
    stream: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    network: NetworkConfig,
    categories: Vec<String>,
    train: TrainConfig,
    step: u64,
    rng: RngState,
    history: Vec<HistoryRow>,
    tensors: Vec<BlobEntry>,
}

fn write_blob(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut bytes = vec![0u8; t.numel() * 4];
    LittleEndian::write_f32_into(t.data(), &mut bytes);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, shape: &[usize]) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Truncated { expected: n * 4, found: bytes.len() });
    }
    let mut data = vec![0f32; n];
    LittleEndian::read_f32_into(&bytes, &mut data);
    Tensor::new(shape.to_vec(), data)
}

/// Writes the model, optimiser moments and progress into directory `dir`.
pub fn save_checkpoint(t: &Trainer, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let groups: [(&str, Vec<&Tensor<f32>>); 3] =
        [("param", t.model.params.iter().map(|(_, x)| x).collect()), ("adam_m", t.adam.m.iter().collect()), ("adam_v", t.adam.v.iter().collect())];
    for (group, tensors) in groups.iter() {
        for (i, ((name, _), x)) in t.model.params.iter().zip(tensors).enumerate() {
            let file = format!("{group}.{i}.f32");
            write_blob(&dir.join(&file), x)?;
            entries.push(BlobEntry { name: name.to_string(), group: group.to_string(), shape: x.shape().to_vec(), file });
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        network: t.model.config.clone(),
        categories: t.model.categories.clone(),
        train: t.config.clone(),
        step: t.adam.step,
        rng: RngState { seed: t.config.seed, stream: t.adam.step },
        history: t.history.clone(),
        tensors: entries,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("version {} (expected {CHECKPOINT_VERSION})", m.version)));
    }
    m.network.validate()?;
    if m.categories.len() != m.network.num_categories {
        return Err(Error::Checkpoint("category list does not match the configuration".into()));
    }
    let mut params = ParamSet::new();
    let (mut mom, mut vel) = (Vec::new(), Vec::new());
    for e in &m.tensors {
        let t = read_blob(&dir.join(&e.file), &e.shape)?;
        match e.group.as_str() {
            "param" => params.insert(e.name.clone(), t),
            "adam_m" => mom.push((e.name.clone(), t)),
            "adam_v" => vel.push((e.name.clone(), t)),
            g => return Err(Error::Checkpoint(format!("unknown tensor group {g}"))),
        }
    }
    let order = |v: Vec<(String, Tensor<f32>)>| -> Result<Vec<Tensor<f32>>> {
        if v.len() != params.len() || v.iter().zip(params.names()).any(|((a, _), b)| a != b) {
            return Err(Error::Checkpoint("optimiser moments do not line up with the parameters".into()));
        }
        Ok(v.into_iter().map(|(_, t)| t).collect())
    };
    let adam = Adam { config: m.train.adam, step: m.step, m: order(mom)?, v: order(vel)? };
    if !adam.matches(&params) {
        return Err(Error::Checkpoint("optimiser moment shapes do not match the parameters".into()));
    }
    if params.numel() != m.network.parameter_count() {
        return Err(Error::Checkpoint(format!("{} parameters stored, configuration needs {}", params.numel(), m.network.parameter_count())));
    }
    let model = Model { config: m.network, categories: m.categories, params };
    Ok(Trainer { model, adam, config: m.train, history: m.history })
}
