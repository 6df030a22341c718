use mpum::network::{build_network_named, Model, NetworkConfig, Predictor, Strategy};
use mpum::tensor::Tensor;
use mpum::train::*;
use mpum::volume::{add_lesion, normalize_modality, synth_phantom, LabelVolume, Volume};
use mpum::{Error, ErrorKind, Modality, Result};

const MODS: [Modality; 2] = [Modality::Ct, Modality::Mr];

fn names(c: usize) -> Vec<String> {
    (1..=c).map(|i| format!("category_{i}")).collect()
}

fn cases(seeds: std::ops::Range<u64>) -> Vec<Case> {
    let mut out = Vec::new();
    for s in seeds {
        let ph = synth_phantom(s, &MODS, 16, 2).unwrap();
        for v in &ph.volumes {
            out.push(Case::new(format!("p{s}_{}", v.modality), normalize_modality(v).unwrap(), ph.labels.clone()).unwrap());
        }
    }
    out
}

fn base(strategy: Strategy) -> NetworkConfig {
    NetworkConfig { num_categories: 2, stages: vec![2, 4], d_t: 4, d_m: 3, patch_size: 8, modalities: MODS.to_vec(), strategy }
}

fn config(steps: usize) -> TrainConfig {
    let mut tc = TrainConfig::new(steps, 5);
    tc.eval_every = 20;
    tc
}

fn trainer(steps: usize) -> Trainer {
    let model = build_network_named(&base(Strategy::Projection), names(2), 3).unwrap();
    Trainer::new(model, config(steps))
}

#[test]
fn zero_steps_is_initialisation() {
    let data = cases(0..2);
    let mut t = trainer(0);
    let before = t.model.clone();
    t.run(&data, &data).unwrap();
    assert_eq!(t.model, before);
    assert!(t.history.is_empty());
}

#[test]
fn deterministic_and_decreasing() {
    let data = cases(0..3);
    let refs: Vec<&Case> = data.iter().collect();
    let mut a = trainer(60);
    a.config.adam.lr = 3e-3;
    let mut b = a.clone();
    let la: Vec<f64> = (0..60).map(|_| a.train_step(&refs).unwrap()).collect();
    let lb: Vec<f64> = (0..60).map(|_| b.train_step(&refs).unwrap()).collect();
    assert_eq!(la, lb);
    assert_eq!(a.model, b.model);
    let head: f64 = la[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = la[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{tail} >= {head}");
}

#[test]
fn strategies_build_expected_models() {
    let data = cases(0..1);
    let tc = config(2);
    let spec = StrategySpec::new(Strategy::Specific, MODS.to_vec());
    let set = train(&base(Strategy::Specific), &names(2), &data, &data, &spec, &tc).unwrap();
    assert_eq!(set.trainers.len(), 2);
    for m in MODS {
        assert_eq!(set.model_for(m).unwrap().config.modalities, vec![m]);
    }
    let spec = StrategySpec::new(Strategy::Mixed, MODS.to_vec());
    let set = train(&base(Strategy::Mixed), &names(2), &data, &data, &spec, &tc).unwrap();
    assert_eq!(set.trainers.len(), 1);
    assert!(set.model_for(Modality::Pet).is_ok());
}

#[test]
fn mismatched_label_table_rejected() {
    let mut data = cases(0..1);
    data[0].labels.category_table[1] = "other".into();
    let err = trainer(2).run(&data, &[]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
}

struct Oracle(Vec<Case>, bool);

impl Predictor for Oracle {
    fn predict(&self, vol: &Volume, _: Modality) -> Result<LabelVolume> {
        let case = self.0.iter().find(|c| c.volume == *vol).expect("known volume");
        let mut out = case.labels.clone();
        if !self.1 {
            out.labels.iter_mut().for_each(|l| *l = 0);
        }
        Ok(out)
    }
}

#[test]
fn evaluation_extremes() {
    let data = cases(0..2);
    let perfect = evaluate(&Oracle(data.clone(), true), &data, &names(2), 2.0).unwrap();
    assert_eq!(perfect.per_case.len(), data.len() * 2);
    assert_eq!(perfect.summary.len(), 2 * MODS.len());
    assert!(perfect.summary.iter().all(|r| r.mean_dice == 1.0 && r.mean_surface_dice == 1.0 && r.cases == 2));
    let empty = evaluate(&Oracle(data.clone(), false), &data, &names(2), 2.0).unwrap();
    assert_eq!(empty.mean_dice(), 0.0);
    assert!(evaluate(&Oracle(data.clone(), true), &data, &names(3), 2.0).is_err());

    let mut buf = Vec::new();
    perfect.write_summary_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = cases(0..2);
    let mut straight = trainer(40);
    straight.run(&data, &data).unwrap();

    let mut half = trainer(20);
    half.run(&data, &data).unwrap();
    save_checkpoint(&half, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded, half);

    let probe = Tensor::new(vec![1, 1, 8, 8, 8], data[0].volume.data[..512].to_vec()).unwrap();
    let (a, _) = half.model.forward(&probe, Modality::Ct, false).unwrap();
    let (b, _) = loaded.model.forward(&probe, Modality::Ct, false).unwrap();
    assert_eq!(a.data(), b.data());

    let mut resumed = loaded;
    resumed.config.steps = 40;
    resumed.run(&data, &data).unwrap();
    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.adam, straight.adam);
    assert_eq!(resumed.history, straight.history);
}

#[test]
fn corrupted_checkpoint_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&trainer(0), dir.path()).unwrap();
    let blob = dir.path().join("param.0.f32");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Truncated { .. })));

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&trainer(0), dir.path()).unwrap();
    let manifest = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap().replacen("\"version\": 1", "\"version\": 9", 1);
    std::fs::write(&manifest, text).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

fn old_logits(model: &Model<f32>, probe: &Tensor<f32>) -> Vec<f32> {
    let (out, _) = model.forward(probe, Modality::Mr, false).unwrap();
    out.data().chunks(512).take(3).flatten().copied().collect()
}

#[test]
fn finetune_preserves_and_validates() {
    let mut ph = synth_phantom(9, &MODS, 16, 2).unwrap();
    add_lesion(&mut ph, 9, "lesion").unwrap();
    let data: Vec<Case> =
        ph.volumes.iter().map(|v| Case::new(format!("f_{}", v.modality), normalize_modality(v).unwrap(), ph.labels.clone()).unwrap()).collect();
    let model = trainer(0).model;
    let new = vec!["lesion".to_string()];
    let t = finetune_add_categories(&model, &new, None, &data, &data, &config(0)).unwrap();
    assert_eq!(t.model.categories.len(), 3);
    let probe = Tensor::new(vec![1, 1, 8, 8, 8], data[1].volume.data[..512].to_vec()).unwrap();
    assert_eq!(old_logits(&model, &probe), old_logits(&t.model, &probe));

    let dup = vec!["category_1".to_string()];
    let err = finetune_add_categories(&model, &dup, None, &data, &data, &config(0)).unwrap_err();
    assert!(matches!(err, Error::DuplicateCategory(_)));

    let t = finetune_add_categories(&model, &new, None, &data, &data, &config(3)).unwrap();
    assert_eq!(t.step(), 3);
    let mut buf = Vec::new();
    write_history(&t.history, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("step,loss,mean_dice_CT,mean_dice_MR"));
}
