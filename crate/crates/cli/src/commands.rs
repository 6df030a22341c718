use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mpum::analytics::{
    load_class_map, pairwise_analysis, read_cohort_csv, read_series_csv, single_organ_test, PairwiseOptions, RoiClass, RoiClassMap, RoiSeries,
};
use mpum::metrics::{overlap_report, region_volume};
use mpum::network::{extract_saliency, Predictor};
use mpum::tensor::Tensor;
use mpum::train::{evaluate, finetune_add_categories, load_checkpoint, save_checkpoint, train, write_history, Case, EvalTable, StrategySpec};
use mpum::viz::{coords_as_rows, flatten_kernels, pca2d, silhouette, tsne2d, write_embedding_csv, write_kl_trace_csv, TsneConfig, TSNE_MIN_POINTS};
use mpum::volume::{
    add_lesion, normalize_modality, read_labels, read_volume, resample_isotropic, resample_labels, synth_phantom, write_labels, write_volume, Volume,
};
use mpum::{Error, Result};
use rand::{Rng, SeedableRng};
use serde_json::json;

use crate::config::{RunConfig, DEFAULT_STEPS};
use crate::dataset::{load_cases, load_models, load_normalized, modalities_of, single_model, CaseEntry, Dataset};
use crate::{manifest, selftest, Command, Global, VizMethod};

const FINETUNE_STEPS: usize = 300;

fn run_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if g.alpha.is_some() {
        cfg.alpha = g.alpha;
    }
    if g.tolerance_mm.is_some() {
        cfg.tolerance_mm = g.tolerance_mm;
    }
    if g.patch_size.is_some() {
        cfg.network.patch_size = g.patch_size;
    }
    if g.strategy.is_some() {
        cfg.network.strategy = g.strategy;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(g: &Global) -> Result<PathBuf> {
    let out = g.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    Ok(out)
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn stem(p: &Path) -> String {
    let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".nii").or_else(|| name.strip_suffix(".raw")).unwrap_or(&name).to_string()
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

pub fn dispatch(g: &Global, cmd: &Command) -> Result<u8> {
    if let Command::Selftest = cmd {
        return Ok(if selftest::run() { 0 } else { 3 });
    }
    let cfg = run_config(g)?;
    let out = out_dir(g)?;
    let (name, args, outputs) = match cmd {
        Command::Synth(a) => (
            "synth",
            json!({"count": a.count, "size": a.size, "categories": a.categories, "modalities": a.modalities, "lesion": a.lesion}),
            synth(a, &cfg, &out)?,
        ),
        Command::Preprocess(a) => (
            "preprocess",
            json!({"cases": a.cases.as_deref().map(display), "input": a.input.as_deref().map(display), "labels": a.labels.as_deref().map(display), "modality": a.modality, "spacing_mm": a.spacing_mm}),
            preprocess(a, &out)?,
        ),
        Command::Train(a) => {
            let mut cfg = cfg.clone();
            if a.cases.is_some() {
                cfg.data.train = a.cases.clone();
            }
            if a.heldout.is_some() {
                cfg.data.heldout = a.heldout.clone();
            }
            if a.steps.is_some() {
                cfg.train.steps = a.steps;
            }
            let outputs = train_cmd(&cfg, &out)?;
            manifest::write(&out, "train", &cfg, &json!({}), &outputs)?;
            return Ok(0);
        }
        Command::Eval(a) => ("eval", json!({"checkpoint": display(&a.checkpoint), "cases": display(&a.cases)}), eval_cmd(a, &cfg, &out)?),
        Command::Finetune(a) => {
            let mut cfg = cfg.clone();
            if a.steps.is_some() {
                cfg.train.steps = a.steps;
            }
            let args = json!({"checkpoint": display(&a.checkpoint), "cases": display(&a.cases), "heldout": a.heldout.as_deref().map(display)});
            let outputs = finetune_cmd(a, &cfg, &out)?;
            manifest::write(&out, "finetune", &cfg, &args, &outputs)?;
            return Ok(0);
        }
        Command::Predict(a) => {
            ("predict", json!({"checkpoint": display(&a.checkpoint), "input": display(&a.input), "modality": a.modality}), predict_cmd(a, &out)?)
        }
        Command::Saliency(a) => (
            "saliency",
            json!({"checkpoint": display(&a.checkpoint), "input": display(&a.input), "modality": a.modality, "stage": a.stage, "category": a.category}),
            saliency_cmd(a, &out)?,
        ),
        Command::Analyze(a) => ("analyze", cohort_json(a), analyze_cmd(a, &cfg, &out)?),
        Command::OrganTest(a) => {
            let mut args = cohort_json(&a.cohorts);
            args["roi"] = json!(a.roi);
            ("organ-test", args, organ_cmd(a, &out)?)
        }
        Command::VizKernels(a) => (
            "viz-kernels",
            json!({"checkpoint": display(&a.checkpoint), "stages": a.stages, "method": format!("{:?}", a.method).to_lowercase(), "perplexity": a.perplexity, "iterations": a.iterations}),
            viz_cmd(a, &cfg, &out)?,
        ),
        Command::VolumeReport(a) => (
            "volume-report",
            json!({"lesion": display(&a.lesion), "atlas": display(&a.atlas), "atlas_names": a.atlas_names.as_deref().map(display)}),
            volume_report_cmd(a, &out)?,
        ),
        Command::Selftest => unreachable!(),
    };
    manifest::write(&out, name, &cfg, &args, &outputs)?;
    Ok(0)
}

fn synth(a: &crate::SynthArgs, cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed());
    let mut outputs = Vec::new();
    let mut cases = Vec::new();
    let mut categories = Vec::new();
    for i in 0..a.count {
        let seed: u64 = rng.gen();
        let mut ph = synth_phantom(seed, &a.modalities, a.size, a.categories)?;
        if let Some(name) = &a.lesion {
            add_lesion(&mut ph, seed, name)?;
        }
        categories = ph.labels.category_table[1..].to_vec();
        let labels = format!("case_{i:03}_labels.nii");
        write_labels(&ph.labels, &out.join(&labels))?;
        for v in &ph.volumes {
            let image = format!("case_{i:03}_{}.nii", v.modality);
            write_volume(v, &out.join(&image))?;
            cases.push(CaseEntry {
                id: format!("case_{i:03}_{}", v.modality),
                modality: v.modality,
                image: image.clone().into(),
                labels: Some(labels.clone().into()),
            });
            outputs.push(image);
        }
        outputs.push(labels);
    }
    Dataset { categories, cases }.save(out)?;
    outputs.push(crate::dataset::INDEX_FILE.into());
    info!("wrote {} phantoms to {}", a.count, out.display());
    Ok(outputs)
}

fn prepare(vol: Volume, spacing: f64) -> Result<Volume> {
    let v = resample_isotropic(&vol, spacing)?;
    if v.normalized {
        Ok(v)
    } else {
        normalize_modality(&v)
    }
}

fn preprocess(a: &crate::PreprocessArgs, out: &Path) -> Result<Vec<String>> {
    let mut outputs = Vec::new();
    if let Some(index) = &a.cases {
        let (mut ds, base) = Dataset::load(index)?;
        let table = ds.table();
        let mut done: HashMap<PathBuf, PathBuf> = HashMap::new();
        for e in &mut ds.cases {
            let vol = read_volume(&base.join(&e.image), Some(e.modality))?;
            let name = PathBuf::from(format!("{}.nii", stem(&e.image)));
            write_volume(&prepare(vol, a.spacing_mm)?, &out.join(&name))?;
            outputs.push(display(&name));
            e.image = name;
            if let Some(l) = e.labels.clone() {
                if !done.contains_key(&l) {
                    let lab = read_labels(&base.join(&l), Some(table.clone()))?;
                    let name = PathBuf::from(format!("{}.nii", stem(&l)));
                    write_labels(&resample_labels(&lab, a.spacing_mm)?, &out.join(&name))?;
                    outputs.push(display(&name));
                    done.insert(l.clone(), name);
                }
                e.labels = Some(done[&l].clone());
            }
        }
        ds.save(out)?;
        outputs.push(crate::dataset::INDEX_FILE.into());
        return Ok(outputs);
    }
    let input = a.input.as_ref().ok_or_else(|| Error::Config("preprocess needs --cases or --input".into()))?;
    let vol = read_volume(input, a.modality)?;
    let name = format!("{}.nii", stem(input));
    write_volume(&prepare(vol, a.spacing_mm)?, &out.join(&name))?;
    outputs.push(name);
    if let Some(l) = &a.labels {
        let lab = read_labels(l, None)?;
        let name = format!("{}.nii", stem(l));
        write_labels(&resample_labels(&lab, a.spacing_mm)?, &out.join(&name))?;
        outputs.push(name);
    }
    Ok(outputs)
}

fn write_eval(table: &EvalTable, out: &Path, prefix: &str) -> Result<Vec<String>> {
    let summary = format!("{prefix}summary.csv");
    let cases = format!("{prefix}cases.csv");
    table.write_summary_csv(create(&out.join(&summary))?)?;
    table.write_cases_csv(create(&out.join(&cases))?)?;
    for r in &table.summary {
        println!("{}\t{}\tdice {:.4}\tsurface_dice {:.4}", r.modality, r.category, r.mean_dice, r.mean_surface_dice);
    }
    println!("mean dice {:.4}", table.mean_dice());
    Ok(vec![summary, cases])
}

fn heldout_cases(path: Option<&Path>, categories: &[String]) -> Result<Vec<Case>> {
    let Some(p) = path else { return Ok(Vec::new()) };
    let (cats, cases) = load_cases(p)?;
    if cats != categories {
        return Err(Error::Data(format!("held-out categories {cats:?} differ from training categories {categories:?}")));
    }
    Ok(cases)
}

fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let data = cfg.data.train.as_ref().ok_or_else(|| Error::Config("train needs --cases or data.train in the config".into()))?;
    let (categories, cases) = load_cases(data)?;
    let held = heldout_cases(cfg.data.heldout.as_deref(), &categories)?;
    let net = cfg.network(categories.len(), &modalities_of(&cases))?;
    let spec = StrategySpec::new(net.strategy, net.modalities.clone());
    let mut tc = cfg.train_config(DEFAULT_STEPS);
    tc.dump_dir = Some(out.join("diverged"));
    info!("training {} strategy for {} steps on {} cases", net.strategy, tc.steps, cases.len());
    let set = train(&net, &categories, &cases, &held, &spec, &tc)?;
    let mut outputs = crate::dataset::save_models(&set, out)?;
    for (i, t) in set.trainers.iter().enumerate() {
        let name = format!("history_{i}.csv");
        write_history(&t.history, create(&out.join(&name))?)?;
        outputs.push(name);
    }
    if !held.is_empty() {
        let table = evaluate(&set, &held, &categories, cfg.tolerance_mm())?;
        outputs.extend(write_eval(&table, out, "eval_")?);
    }
    Ok(outputs)
}

fn eval_cmd(a: &crate::EvalArgs, cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let set = load_models(&a.checkpoint)?;
    let (categories, cases) = load_cases(&a.cases)?;
    let table = evaluate(&set, &cases, &categories, cfg.tolerance_mm())?;
    write_eval(&table, out, "")
}

fn finetune_cmd(a: &crate::FinetuneArgs, cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let base = single_model(&a.checkpoint)?;
    let (categories, cases) = load_cases(&a.cases)?;
    let old = &base.model.categories;
    if categories.len() <= old.len() || categories[..old.len()] != old[..] {
        return Err(Error::Data(format!("dataset categories {categories:?} must extend the model's {old:?}")));
    }
    let new = &categories[old.len()..];
    let held = heldout_cases(a.heldout.as_deref(), &categories)?;
    let mut tc = cfg.train_config(FINETUNE_STEPS);
    tc.adam = mpum::train::AdamConfig { lr: cfg.train.lr.unwrap_or(base.config.adam.lr), ..base.config.adam };
    tc.dump_dir = Some(out.join("diverged"));
    let t = finetune_add_categories(&base.model, new, None, &cases, &held, &tc)?;
    save_checkpoint(&t, &out.join("checkpoint"))?;
    write_history(&t.history, create(&out.join("history.csv"))?)?;
    let mut outputs = vec!["checkpoint".to_string(), "history.csv".to_string()];
    if !held.is_empty() {
        let set = mpum::train::ModelSet { strategy: t.model.config.strategy, trainers: vec![t] };
        outputs.extend(write_eval(&evaluate(&set, &held, &categories, cfg.tolerance_mm())?, out, "eval_")?);
    }
    // a fresh load proves the checkpoint is complete
    load_checkpoint(&out.join("checkpoint"))?;
    Ok(outputs)
}

fn predict_cmd(a: &crate::PredictArgs, out: &Path) -> Result<Vec<String>> {
    let set = load_models(&a.checkpoint)?;
    let vol = load_normalized(&a.input, a.modality)?;
    let labels = set.predict(&vol, vol.modality)?;
    let name = format!("{}_labels.nii", stem(&a.input));
    write_labels(&labels, &out.join(&name))?;
    let table = format!("{}_labels.json", stem(&a.input));
    std::fs::write(out.join(&table), serde_json::to_string_pretty(&labels.category_table)?).map_err(|e| Error::Io { path: out.join(&table), source: e })?;
    Ok(vec![name, table])
}

/// Centred `p^3` crop, zero padded.
fn centre_patch(vol: &Volume, p: usize) -> Result<Tensor<f32>> {
    let corner: Vec<isize> = vol.dims.iter().map(|&d| (d as isize - p as isize) / 2).collect();
    let mut data = vec![0f32; p * p * p];
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                let (sx, sy, sz) = (x as isize + corner[0], y as isize + corner[1], z as isize + corner[2]);
                let inside = [sx, sy, sz].iter().zip(&vol.dims).all(|(&s, &d)| s >= 0 && (s as usize) < d);
                if inside {
                    data[x + p * (y + p * z)] = vol.at(sx as usize, sy as usize, sz as usize);
                }
            }
        }
    }
    Tensor::new(vec![1, 1, p, p, p], data)
}

fn saliency_cmd(a: &crate::SaliencyArgs, out: &Path) -> Result<Vec<String>> {
    let set = load_models(&a.checkpoint)?;
    let vol = load_normalized(&a.input, a.modality)?;
    let model = set.model_for(vol.modality)?;
    let stage = a.stage.unwrap_or(model.config.num_stages() - 1);
    let cats: Vec<usize> = match &a.category {
        Some(name) => vec![model.categories.iter().position(|c| c == name).ok_or_else(|| Error::UnknownCategory(name.clone()))?],
        None => (0..model.num_categories()).collect(),
    };
    let patch = centre_patch(&vol, model.config.patch_size)?;
    let mut outputs = Vec::new();
    for c in cats {
        let map = extract_saliency(model, &patch, vol.modality, stage, c)?;
        let name = format!("saliency_stage{stage}_{}.nii", model.categories[c]);
        write_volume(&map, &out.join(&name))?;
        outputs.push(name);
    }
    Ok(outputs)
}

fn cohort_json(a: &crate::CohortArgs) -> serde_json::Value {
    json!({
        "cohorts": a.cohorts.as_deref().map(display),
        "control": a.control.as_deref().map(display),
        "patient": a.patient.as_deref().map(display),
        "classes": a.classes.as_deref().map(display),
        "exclude": a.exclude,
        "pair_class": a.pair_class,
    })
}

fn load_cohorts(a: &crate::CohortArgs) -> Result<(RoiSeries, RoiSeries)> {
    match (&a.cohorts, &a.control, &a.patient) {
        (Some(p), _, _) => read_cohort_csv(p),
        (None, Some(c), Some(p)) => Ok((read_series_csv(c, "control")?, read_series_csv(p, "patient")?)),
        _ => Err(Error::Config("pass --cohorts, or both --control and --patient".into())),
    }
}

/// Without a class map, ROIs named `brain...` are brain regions.
fn class_map(a: &crate::CohortArgs, rois: &[String]) -> Result<RoiClassMap> {
    if let Some(p) = &a.classes {
        return load_class_map(p);
    }
    info!("no --classes given; classifying ROIs by a 'brain' name prefix");
    Ok(rois.iter().map(|r| (r.clone(), if r.to_ascii_lowercase().starts_with("brain") { RoiClass::Brain } else { RoiClass::Body })).collect())
}

fn analyze_cmd(a: &crate::CohortArgs, cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let (control, patient) = load_cohorts(a)?;
    let classes = class_map(a, &control.rois)?;
    let opts = PairwiseOptions { exclusions: a.exclude.clone(), classes: a.pair_class.clone() };
    let report = pairwise_analysis(&control, &patient, &classes, cfg.alpha(), &opts)?;
    report.write_csv(create(&out.join("pairs.csv"))?)?;
    let significant = report.significant().count();
    let summary = json!({
        "alpha": report.alpha,
        "counts": report.counts,
        "tested": report.rows.len(),
        "significant": significant,
        "skipped": report.skipped,
        "roi_tallies": report.roi_tallies,
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?).map_err(|e| Error::Io { path: out.join("summary.json"), source: e })?;
    let c = report.counts;
    println!(
        "pairs {} (brain-brain {}, brain-body {}, body-body {}); tested {}; significant {significant} at alpha {}",
        c.total,
        c.brain_brain,
        c.brain_body,
        c.body_body,
        report.rows.len(),
        report.alpha
    );
    Ok(vec!["pairs.csv".into(), "summary.json".into()])
}

fn organ_cmd(a: &crate::OrganArgs, out: &Path) -> Result<Vec<String>> {
    let (control, patient) = load_cohorts(&a.cohorts)?;
    let rois: Vec<String> = if a.roi.is_empty() { control.rois.iter().filter(|r| patient.rois.contains(r)).cloned().collect() } else { a.roi.clone() };
    let mut w = csv_writer(&out.join("organ_test.csv"))?;
    w.write_record(["roi", "mean_control", "mean_patient", "statistic", "df", "p"])?;
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    for roi in &rois {
        let r = single_organ_test(&control, &patient, roi)?;
        let (mc, mp) = (mean(control.series(roi)?), mean(patient.series(roi)?));
        w.write_record([roi.clone(), mc.to_string(), mp.to_string(), r.statistic.to_string(), r.df.to_string(), r.p.to_string()])?;
        println!("{roi}\tt {:.4}\tdf {:.2}\tp {:.4e}", r.statistic, r.df, r.p);
    }
    flush(w)?;
    Ok(vec!["organ_test.csv".into()])
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn flush(mut w: csv::Writer<File>) -> Result<()> {
    w.flush().map_err(|e| Error::Io { path: "csv".into(), source: e })
}

fn viz_cmd(a: &crate::VizArgs, cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let t = single_model(&a.checkpoint)?;
    let model = &t.model;
    let stages: Vec<usize> = if a.stages.is_empty() { (0..model.config.num_stages()).collect() } else { a.stages.clone() };
    let mods = model.config.modalities.clone();
    let sets = flatten_kernels(model, &mods, &stages)?;
    let mut outputs = Vec::new();
    let mut sil = csv_writer(&out.join("silhouette.csv"))?;
    sil.write_record(["stage", "method", "modality_silhouette"])?;
    let mut by_stage = Vec::new();
    for set in &sets {
        let labels = set.modality_labels();
        let name = format!("embedding_stage{}.csv", set.stage);
        let mut buf = Vec::new();
        let mut methods: Vec<(&str, Vec<[f64; 2]>)> = Vec::new();
        if a.method != VizMethod::Tsne {
            methods.push(("pca", pca2d(&set.rows)?));
        }
        let skip_tsne = a.method == VizMethod::Both && set.rows.len() < TSNE_MIN_POINTS;
        if skip_tsne {
            warn!("stage {}: {} kernels are too few for t-SNE; PCA only", set.stage, set.rows.len());
        }
        if a.method != VizMethod::Pca && !skip_tsne {
            let tc = TsneConfig { perplexity: a.perplexity, iterations: a.iterations, seed: cfg.seed(), ..TsneConfig::default() };
            let res = tsne2d(&set.rows, &tc)?;
            let kl = format!("kl_trace_stage{}.csv", set.stage);
            write_kl_trace_csv(&res.kl_trace, create(&out.join(&kl))?)?;
            outputs.push(kl);
            methods.push(("tsne", res.coords));
        }
        for (i, (method, coords)) in methods.iter().enumerate() {
            let mut part = Vec::new();
            write_embedding_csv(&set.tags, coords, method, &mut part)?;
            // one header for the whole file
            let text = String::from_utf8(part).expect("csv is utf-8");
            let body = if i == 0 { text.as_str() } else { text.split_once('\n').map_or("", |(_, b)| b) };
            buf.extend_from_slice(body.as_bytes());
            if mods.len() > 1 {
                let s = silhouette(&coords_as_rows(coords), &labels)?;
                sil.write_record([set.stage.to_string(), method.to_string(), s.to_string()])?;
                by_stage.push((set.stage, *method, s));
            }
        }
        std::fs::write(out.join(&name), buf).map_err(|e| Error::Io { path: out.join(&name), source: e })?;
        outputs.push(name);
    }
    flush(sil)?;
    outputs.push("silhouette.csv".into());
    for (stage, method, s) in &by_stage {
        println!("stage {stage}\t{method}\tmodality silhouette {s:.4}");
    }
    Ok(outputs)
}

fn volume_report_cmd(a: &crate::VolumeReportArgs, out: &Path) -> Result<Vec<String>> {
    let lesion = read_labels(&a.lesion, None)?;
    let table = match &a.atlas_names {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            let names: Vec<String> = serde_json::from_str(&text)?;
            Some(mpum::volume::LabelVolume::table_with_background(&names))
        }
        None => None,
    };
    let atlas = read_labels(&a.atlas, table)?;
    let mut regions = csv_writer(&out.join("regions.csv"))?;
    regions.write_record(["label", "region", "volume_mm3"])?;
    for (i, name) in atlas.category_table.iter().enumerate().skip(1) {
        regions.write_record([i.to_string(), name.clone(), region_volume(&atlas, i as u16)?.to_string()])?;
    }
    flush(regions)?;
    let report = overlap_report(&lesion, &atlas)?;
    report.save(&out.join("overlap"))?;
    for r in &report.rows {
        println!("{}\t{:.1} mm3 of {:.1}", r.region, r.overlap_mm3, r.region_total_mm3);
    }
    Ok(vec!["regions.csv".into(), "overlap.csv".into(), "overlap.json".into()])
}
