//! Run configuration. Precedence, lowest first: built-in defaults, the
//! `--config` file, command-line flags.

use std::path::{Path, PathBuf};

use mpum::network::{NetworkConfig, Strategy};
use mpum::train::TrainConfig;
use mpum::{Error, Modality, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modalities: Option<Vec<Modality>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset index files, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment_prob: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

pub const DEFAULT_STEPS: usize = 2000;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train, &mut cfg.data.heldout].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return bad(format!("alpha {a} must lie in (0, 1]"));
            }
        }
        if let Some(t) = self.tolerance_mm {
            if !(t >= 0.0) {
                return bad(format!("tolerance_mm {t} must be nonnegative"));
            }
        }
        if self.network.patch_size == Some(0) {
            return bad("patch_size must be positive".into());
        }
        if let Some(lr) = self.train.lr {
            if !(lr > 0.0) {
                return bad(format!("lr {lr} must be positive"));
            }
        }
        if let Some(p) = self.train.augment_prob {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("augment_prob {p} must lie in [0, 1]"));
            }
        }
        if self.train.batch == Some(0) {
            return bad("batch must be positive".into());
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn tolerance_mm(&self) -> f64 {
        self.tolerance_mm.unwrap_or(mpum::metrics::DEFAULT_TOLERANCE_MM)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(mpum::analytics::DEFAULT_ALPHA)
    }

    /// Network for `categories` categories; modalities default to the ones
    /// present in the training data.
    pub fn network(&self, categories: usize, data_modalities: &[Modality]) -> Result<NetworkConfig> {
        let d = NetworkConfig::default();
        let n = &self.network;
        let cfg = NetworkConfig {
            num_categories: categories,
            stages: n.stages.clone().unwrap_or(d.stages),
            d_t: n.d_t.unwrap_or(d.d_t),
            d_m: n.d_m.unwrap_or(d.d_m),
            patch_size: n.patch_size.unwrap_or(d.patch_size),
            modalities: n.modalities.clone().unwrap_or_else(|| data_modalities.to_vec()),
            strategy: n.strategy.unwrap_or(d.strategy),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, default_steps: usize) -> TrainConfig {
        let t = &self.train;
        let mut tc = TrainConfig::new(t.steps.unwrap_or(default_steps), self.seed());
        if let Some(lr) = t.lr {
            tc.adam.lr = lr;
        }
        if let Some(b) = t.batch {
            tc.batch = b;
        }
        if let Some(e) = t.eval_every {
            tc.eval_every = e;
        }
        if let Some(p) = t.augment_prob {
            tc.augment_prob = p;
        }
        tc
    }
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
