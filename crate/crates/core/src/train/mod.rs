//! Training strategies, optimisation, evaluation and checkpoints.

mod adam;
mod checkpoint;
mod evaluate;

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::network::{build_network_named, compute_loss, Model, NetworkConfig, Predictor, Strategy};
use crate::tensor::Tensor;
use crate::volume::{augment_contrast, augment_gaussian, sample_training_patch, LabelVolume, Volume};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use evaluate::{evaluate, mean_dice, EvalRow, EvalTable, SummaryRow};

/// A preprocessed image with its reference labelling.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub labels: LabelVolume,
}

impl Case {
    pub fn new(id: impl Into<String>, volume: Volume, labels: LabelVolume) -> Result<Self> {
        if volume.dims != labels.dims {
            return Err(Error::shape("case", format!("image {:?} vs labels {:?}", volume.dims, labels.dims)));
        }
        Ok(Self { id: id.into(), volume, labels })
    }

    pub fn modality(&self) -> Modality {
        self.volume.modality
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: Strategy,
    pub modalities: Vec<Modality>,
}

impl StrategySpec {
    pub fn new(kind: Strategy, modalities: Vec<Modality>) -> Self {
        Self { kind, modalities }
    }

    /// One configuration per model the strategy trains.
    pub fn model_configs(&self, base: &NetworkConfig) -> Result<Vec<NetworkConfig>> {
        if self.modalities.is_empty() {
            return Err(Error::Config("strategy needs at least one modality".into()));
        }
        let mk = |modalities: Vec<Modality>| NetworkConfig { modalities, strategy: self.kind, ..base.clone() };
        let cfgs = match self.kind {
            Strategy::Specific => self.modalities.iter().map(|&m| mk(vec![m])).collect(),
            _ => vec![mk(self.modalities.clone())],
        };
        for c in &cfgs {
            c.validate()?;
        }
        Ok(cfgs)
    }
}

fn default_batch() -> usize {
    2
}
fn default_eval_every() -> usize {
    50
}
fn default_aug() -> f64 {
    0.15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Held-out evaluation period; 0 disables it.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Probability of a Gaussian blur, and separately of a contrast change.
    #[serde(default = "default_aug")]
    pub augment_prob: f64,
    /// Where to write the last good state when the loss turns non-finite.
    #[serde(default)]
    pub dump_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self { steps, seed, batch: default_batch(), adam: AdamConfig::default(), eval_every: default_eval_every(), augment_prob: default_aug(), dump_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    /// Mean foreground Dice on the held-out cases of each modality.
    pub dice: Vec<(Modality, f64)>,
}

pub fn write_history(rows: &[HistoryRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mods: Vec<Modality> = rows.first().map(|r| r.dice.iter().map(|d| d.0).collect()).unwrap_or_default();
    let mut header = vec!["step".to_string(), "loss".to_string()];
    header.extend(mods.iter().map(|m| format!("mean_dice_{m}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.loss.to_string()];
        rec.extend(r.dice.iter().map(|d| d.1.to_string()));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("history", e))
}

/// Model, optimiser and progress of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam,
    pub config: TrainConfig,
    pub history: Vec<HistoryRow>,
}

const STEP_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ STEP_STREAM_SALT);
    rng.set_stream(step);
    rng
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Self {
        let adam = Adam::new(config.adam, &model.params);
        Self { model, adam, config, history: Vec::new() }
    }

    pub fn step(&self) -> usize {
        self.adam.step as usize
    }

    fn own_cases<'a>(&self, cases: &'a [Case]) -> Vec<&'a Case> {
        cases.iter().filter(|c| self.model.config.modalities.contains(&c.modality())).collect()
    }

    fn check_cases(&self, cases: &[&Case]) -> Result<()> {
        let table = LabelVolume::table_with_background(&self.model.categories);
        for c in cases {
            if c.labels.category_table != table {
                return Err(Error::Data(format!("case {} labels {:?}, model expects {:?}", c.id, c.labels.category_table, table)));
            }
        }
        for m in &self.model.config.modalities {
            if !cases.iter().any(|c| c.modality() == *m) {
                return Err(Error::Data(format!("no training data for modality {m}")));
            }
        }
        Ok(())
    }

    /// Runs one optimiser step on a freshly sampled batch and returns its loss.
    pub fn train_step(&mut self, cases: &[&Case]) -> Result<f64> {
        let p = self.model.config.patch_size;
        let mut rng = step_rng(self.config.seed, self.adam.step);
        let mut samples = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            let case = cases[rng.gen_range(0..cases.len())];
            let mut s = sample_training_patch(&case.volume, &case.labels, p, &case.id, &mut rng)?;
            if rng.gen_bool(self.config.augment_prob) {
                s.image = augment_gaussian(&s.image, p, &mut rng);
            }
            if rng.gen_bool(self.config.augment_prob) {
                s.image = augment_contrast(&s.image, &mut rng);
            }
            samples.push(s);
        }

        let mut g = crate::tensor::Graph::new();
        let bound = self.model.params.bind(&mut g, true)?;
        let mut total = None;
        for s in &samples {
            let x = g.constant(Tensor::new(vec![1, 1, p, p, p], s.image.clone())?)?;
            let out = self.model.forward_graph(&mut g, &bound, x, s.modality)?;
            let loss = compute_loss(&mut g, out.logits, s.labels.as_deref().expect("training patches carry labels"))?;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let loss = g.scale(total.expect("batch is nonempty"), 1.0 / samples.len() as f64)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            let dump = match &self.config.dump_dir {
                Some(dir) => {
                    save_checkpoint(self, dir)?;
                    Some(dir.clone())
                }
                None => None,
            };
            return Err(Error::Diverged { step: self.step(), loss: value, dump });
        }
        g.backward(loss)?;
        let grads: Vec<Option<Tensor<f32>>> = bound.vars().iter().map(|&v| g.grad(v).cloned()).collect();
        self.adam.update(&mut self.model.params, &grads)?;
        Ok(value)
    }

    /// Trains until `config.steps`, evaluating on `heldout` every
    /// `eval_every` steps.
    pub fn run(&mut self, cases: &[Case], heldout: &[Case]) -> Result<()> {
        let own = self.own_cases(cases);
        let held = self.own_cases(heldout);
        if self.step() >= self.config.steps {
            return Ok(());
        }
        self.check_cases(&own)?;
        while self.step() < self.config.steps {
            let loss = self.train_step(&own)?;
            let step = self.step();
            if self.config.eval_every > 0 && (step % self.config.eval_every == 0 || step == self.config.steps) {
                let mut dice = Vec::new();
                for &m in &self.model.config.modalities {
                    let cs: Vec<Case> = held.iter().filter(|c| c.modality() == m).map(|&c| c.clone()).collect();
                    if !cs.is_empty() {
                        dice.push((m, mean_dice(&self.model, &cs)?));
                    }
                }
                log::info!("step {step} loss {loss:.4} dice {:?}", dice);
                self.history.push(HistoryRow { step, loss, dice });
            }
        }
        Ok(())
    }
}

/// Models trained under one strategy, routed by input modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSet {
    pub strategy: Strategy,
    pub trainers: Vec<Trainer>,
}

impl ModelSet {
    pub fn models(&self) -> impl Iterator<Item = &Model<f32>> {
        self.trainers.iter().map(|t| &t.model)
    }

    pub fn model_for(&self, m: Modality) -> Result<&Model<f32>> {
        self.models().find(|model| model.route(m).is_ok()).ok_or_else(|| Error::UnknownModality(m.to_string()))
    }
}

impl Predictor for ModelSet {
    fn predict(&self, vol: &Volume, modality: Modality) -> Result<LabelVolume> {
        self.model_for(modality)?.predict(vol, modality)
    }
}

/// Trains every model of `spec` from a `seed`-determined initialisation.
pub fn train(base: &NetworkConfig, categories: &[String], cases: &[Case], heldout: &[Case], spec: &StrategySpec, tc: &TrainConfig) -> Result<ModelSet> {
    let mut trainers = Vec::new();
    for cfg in spec.model_configs(base)? {
        let model = build_network_named(&cfg, categories.to_vec(), tc.seed)?;
        let mut t = Trainer::new(model, tc.clone());
        t.run(cases, heldout)?;
        trainers.push(t);
    }
    Ok(ModelSet { strategy: spec.kind, trainers })
}

/// Adds categories to a trained model and keeps training on `cases`,
/// whose labels must use the extended table, with a fresh optimiser.
pub fn finetune_add_categories(
    model: &Model<f32>,
    names: &[String],
    latents: Option<&Tensor<f32>>,
    cases: &[Case],
    heldout: &[Case],
    tc: &TrainConfig,
) -> Result<Trainer> {
    let mut m = model.clone();
    m.add_categories(names, latents, tc.seed)?;
    let mut t = Trainer::new(m, tc.clone());
    t.run(cases, heldout)?;
    Ok(t)
}
