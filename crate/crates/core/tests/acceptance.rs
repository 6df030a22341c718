//! Acceptance suite: one pass/fail line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4,8` restricts the run to the listed criteria. Failing
//! criteria are reported but only fail the process with `ACCEPTANCE_STRICT=1`,
//! so the rest of the workspace tests still run.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::ops::{check_op, ALL_OPS};
use common::oracles::{brute_dice, brute_surface_dice, random_mask, FISHER_P, FISHER_Z, PHI_GRID};
use mpum::analytics::{enumerate_pairs, fisher_compare, normal_cdf, RoiClass, RoiClassMap};
use mpum::metrics::{dice, surface_dice, MaskPair};
use mpum::network::{build_network, compute_loss, extract_saliency, Model, NetworkConfig, Strategy};
use mpum::projection::{
    self, aggregate_external, generate_kernels, project_latent, reconstruct_latent, ExternalEmbeddingSet, FogStage, FogVars, LatentTable, ProjectionSet,
};
use mpum::tensor::{grad_check, Tensor, GRAD_EPS};
use mpum::train::{evaluate, finetune_add_categories, load_checkpoint, save_checkpoint, train, Case, ModelSet, StrategySpec, TrainConfig, Trainer};
use mpum::viz::{coords_as_rows, flatten_kernels, pca2d, silhouette, tsne2d, TsneConfig};
use mpum::volume::{add_lesion, normalize_modality, read_nifti, synth_phantom, write_nifti, NiftiImage, NiftiType};
use mpum::Modality;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

const MODS: [Modality; 2] = [Modality::Ct, Modality::Mr];

// Desk-scale training setup shared by criteria 6, 7, 9 and 10.
const CATEGORIES: usize = 3;
const PHANTOM_SIZE: usize = 32;
const TRAIN_PHANTOMS: std::ops::Range<u64> = 0..16;
const HELDOUT_PHANTOMS: std::ops::Range<u64> = 100..102;
const STAGES: [usize; 3] = [8, 16, 32];
const STEPS: usize = 500;
const LR: f64 = 2e-3;
const SEEDS: [u64; 3] = [0, 1, 2];
const FINETUNE_STEPS: usize = 300;
const LESION: &str = "hemorrhage";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn desk_config(strategy: Strategy) -> NetworkConfig {
    NetworkConfig { num_categories: CATEGORIES, stages: STAGES.to_vec(), d_t: 16, d_m: 8, patch_size: PHANTOM_SIZE, modalities: MODS.to_vec(), strategy }
}

fn desk_train_config(steps: usize, seed: u64) -> TrainConfig {
    let mut tc = TrainConfig::new(steps, seed);
    tc.adam.lr = LR;
    tc.batch = 1;
    tc.eval_every = 0;
    tc
}

fn category_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("category_{i}")).collect()
}

fn phantom_cases(seeds: std::ops::Range<u64>, lesion: bool) -> Vec<Case> {
    let mut out = Vec::new();
    for s in seeds {
        let mut ph = synth_phantom(s, &MODS, PHANTOM_SIZE, CATEGORIES).unwrap();
        if lesion {
            add_lesion(&mut ph, s, LESION).unwrap();
        }
        for v in &ph.volumes {
            out.push(Case::new(format!("phantom_{s}_{}", v.modality), normalize_modality(v).unwrap(), ph.labels.clone()).unwrap());
        }
    }
    out
}

fn train_desk(strategy: Strategy, seed: u64, cases: &[Case]) -> ModelSet {
    let spec = StrategySpec::new(strategy, MODS.to_vec());
    train(&desk_config(strategy), &category_names(CATEGORIES), cases, &[], &spec, &desk_train_config(STEPS, seed)).unwrap()
}

fn unit_latents(m: &mut Model<f64>, seed: u64) {
    // unit-scale latents keep every probed gradient well above roundoff
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lat = Tensor::from_fn(&[m.num_categories(), m.config.d_t], |_| rng.gen_range(-1.0..1.0));
    m.set_latents(&LatentTable::new(m.categories.clone(), lat).unwrap()).unwrap();
}

fn gradient_integrity() -> Outcome {
    let mut worst_op = 0.0f64;
    for seed in 0..5 {
        for op in ALL_OPS {
            worst_op = worst_op.max(check_op(op, seed));
        }
    }

    // conv3d whose kernels are computed at run time from projected latents
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (c, d_t, d_m, h, p) = (2, 4, 3, 2, 8);
    let noise = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let fog: FogStage<f64> = FogStage::random(d_m, projection::FOG_HIDDEN, h, &mut rng);
    let lat = noise(&[c, d_t], &mut rng);
    let proj = noise(&[d_t, d_m], &mut rng);
    let x = noise(&[1, h, p, p, p], &mut rng);
    let wt = noise(&[1, c, p, p, p], &mut rng);
    let runtime = grad_check(
        |g, v| {
            let feats = g.matmul(v[0], v[1])?;
            let k = generate_kernels(g, feats, FogVars { w1: v[2], b1: v[3], w2: v[4], b2: v[5] }, h)?;
            let xv = g.constant(x.clone())?;
            let y = g.conv3d(xv, k, 1, 1)?;
            let w = g.constant(wt.clone())?;
            let y = g.mul(y, w)?;
            g.sum(y)
        },
        &[lat.clone(), proj.clone(), fog.w1.clone(), fog.b1.clone(), fog.w2.clone(), fog.b2.clone()],
        GRAD_EPS,
    )
    .unwrap();

    // one dual-branch block between head and tail, C=2, P=8
    let head = noise(&[h, 1, 3, 3, 3], &mut rng);
    let trad = noise(&[h, h, 3, 3, 3], &mut rng);
    let fuse = noise(&[h, h + c], &mut rng);
    let tail = noise(&[c + 1, h], &mut rng);
    let img = Tensor::from_fn(&[1, 1, p, p, p], |_| rng.gen_range(0.0..1.0));
    let labels: Vec<u16> = (0..p * p * p).map(|_| rng.gen_range(0..=c as u16)).collect();
    let block = grad_check(
        |g, v| {
            let xv = g.constant(img.clone())?;
            let hd = g.conv3d(xv, v[6], 1, 1)?;
            let hd = g.relu(hd)?;
            let t = g.conv3d(hd, v[7], 1, 1)?;
            let t = g.relu(t)?;
            let feats = g.matmul(v[0], v[1])?;
            let k = generate_kernels(g, feats, FogVars { w1: v[2], b1: v[3], w2: v[4], b2: v[5] }, h)?;
            let sal = g.conv3d(t, k, 1, 1)?;
            let cat = g.concat_channels(t, sal)?;
            let f = g.conv1x1(cat, v[8])?;
            let f = g.relu(f)?;
            let logits = g.conv1x1(f, v[9])?;
            compute_loss(g, logits, &labels)
        },
        &[lat, proj, fog.w1, fog.b1, fog.w2, fog.b2, head, trad, fuse, tail],
        GRAD_EPS,
    )
    .unwrap();

    // smallest buildable network at P=8, C=2; reported, not gated: a few FOG
    // weights behind leaky units carry gradients near 1e-8, where central
    // differences at this step are limited by roundoff
    let cfg = NetworkConfig { num_categories: 2, stages: vec![2, 3], d_t: 4, d_m: 3, patch_size: 8, modalities: MODS.to_vec(), strategy: Strategy::Projection };
    let mut m: Model<f64> = build_network(&cfg, 11).unwrap();
    unit_latents(&mut m, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = Tensor::from_fn(&[1, 1, 8, 8, 8], |_| rng.gen_range(0.0..1.0));
    let labels: Vec<u16> = (0..512).map(|_| rng.gen_range(0..3)).collect();
    let names = ["latents", "proj.CT", "fog.0.w1", "fog.1.w2", "fog.1.b1", "head.w", "enc.0.w", "enc.1.fuse.w", "dec.0.w", "tail.w", "tail.b"];
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| m.params.get(n).unwrap().clone()).collect();
    let network = grad_check(
        |g, vars| {
            let given: Vec<(&str, _)> = names.iter().copied().zip(vars.iter().copied()).collect();
            let b = m.params.bind_with(g, &given)?;
            let xv = g.constant(img.clone())?;
            let out = m.forward_graph(g, &b, xv, Modality::Ct)?;
            compute_loss(g, out.logits, &labels)
        },
        &inputs,
        GRAD_EPS,
    )
    .unwrap();

    let worst = worst_op.max(runtime).max(block);
    outcome(
        worst <= 1e-4,
        format!(
            "max rel. error {worst:.2e} ({} ops x 5 seeds {worst_op:.1e}; runtime-kernel conv {runtime:.1e}; 1-block network {block:.1e}); [info] 2-stage network {network:.1e}",
            ALL_OPS.len()
        ),
    )
}

fn well_conditioned(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let scale = 0.3 / (n as f64).sqrt();
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 } + scale * rng.sample::<f64, _>(StandardNormal))
}

fn projection_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut round_trip = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(2..24);
        let p = well_conditioned(n, &mut rng);
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let t = Tensor::from_fn(&[3, n], |_| rng.sample::<f64, _>(StandardNormal));
        let table = LatentTable::new(names, t.clone()).unwrap();
        let mut proj = ProjectionSet::new(n);
        proj.insert_modality(Modality::Ct, p.clone()).unwrap();
        let m = project_latent(&table, &proj, Modality::Ct).unwrap();
        for c in 0..3 {
            let back = reconstruct_latent(&m.data()[c * n..(c + 1) * n], &p, 0.0).unwrap();
            for (a, b) in back.iter().zip(&t.data()[c * n..(c + 1) * n]) {
                round_trip = round_trip.max((a - b).abs());
            }
        }
    }

    let nd = Normal::new(0.0, 1.0).unwrap();
    let (c, dt) = (5, 6);
    let names: Vec<String> = (0..c).map(|i| format!("organ_{i}")).collect();
    let t = Tensor::from_fn(&[c, dt], |_| nd.sample(&mut rng));
    let mut proj = ProjectionSet::new(dt);
    let mut sets = Vec::new();
    for (src, dim) in [("text", 16), ("image", 10)] {
        let p = Tensor::from_fn(&[dt, dim], |_| nd.sample(&mut rng));
        let mut emb = BTreeMap::new();
        for (ci, name) in names.iter().enumerate() {
            let row: Vec<f64> = (0..dim).map(|k| (0..dt).map(|j| t.data()[ci * dt + j] * p.data()[j * dim + k]).sum()).collect();
            emb.insert(name.clone(), row);
        }
        proj.insert_external(src, p).unwrap();
        sets.push(ExternalEmbeddingSet { source_id: src.into(), dim, embeddings: emb });
    }
    let table = aggregate_external(&sets, &names, &proj, 0.0).unwrap();
    let planted = table.latents().data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(round_trip <= 1e-9 && planted <= 1e-8, format!("20 square round trips max error {round_trip:.1e}; planted aggregate (N=2) max error {planted:.1e}"))
}

fn pair_taxonomy() -> Outcome {
    let mut classes = RoiClassMap::new();
    for i in 0..83 {
        classes.insert(format!("brain_{i:03}"), RoiClass::Brain);
    }
    for i in 0..132 {
        classes.insert(format!("body_{i:03}"), RoiClass::Body);
    }
    let excl: Vec<String> = (0..12).map(|i| format!("body_{i:03}")).collect();
    let (pairs, c) = enumerate_pairs(&classes, &excl).unwrap();
    let got = [c.brain_brain, c.brain_body, c.body_body, c.total];
    outcome(got == [3403, 9960, 7140, 20503] && pairs.len() == c.total, format!("brain-brain/brain-body/body-body/total = {got:?}"))
}

fn fisher_numerics() -> Outcome {
    let r = fisher_compare(0.9, 33, 0.3, 55).unwrap();
    let z_ok = (r.z_score - 5.0713).abs() <= 1e-3 && (r.z_score - FISHER_Z).abs() <= 1e-9;
    let p_ok = ((r.p - 3.96e-7) / 3.96e-7).abs() <= 0.05 && ((r.p - FISHER_P) / FISHER_P).abs() <= 1e-9;
    let phi = PHI_GRID.iter().map(|&(x, v)| (normal_cdf(x) - v).abs()).fold(0.0, f64::max);
    outcome(z_ok && p_ok && phi <= 1e-7, format!("z {:.6}, p {:.4e}; Phi grid ({} points) max error {phi:.1e}", r.z_score, r.p, PHI_GRID.len()))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let spacings = [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [1.0, 1.5, 2.0], [0.5, 1.0, 3.0]];
    let taus = [0.0, 1.0, 2.0, 3.0, 4.5];
    let (mut mismatches, mut monotone) = (0, true);
    let mut pairs = 0;
    for (count, n) in [(100, 16), (50, 12)] {
        let d = [n, n, n];
        for i in 0..count {
            let (pa, pb) = (rng.gen_range(0.02..0.6), rng.gen_range(0.02..0.6));
            let a = random_mask(&mut rng, n * n * n, pa);
            let b = if i % 10 == 0 { vec![false; n * n * n] } else { random_mask(&mut rng, n * n * n, pb) };
            let s = spacings[i % spacings.len()];
            let pair = MaskPair::new(a.clone(), b.clone(), d, s).unwrap();
            if dice(&pair) != brute_dice(&a, &b) {
                mismatches += 1;
            }
            let mut last = -1.0;
            for &tau in &taus {
                let sd = surface_dice(&pair, tau).unwrap();
                if sd != brute_surface_dice(&a, &b, d, s, tau) {
                    mismatches += 1;
                }
                if sd < last {
                    monotone = false;
                }
                last = sd;
            }
            pairs += 1;
        }
    }
    outcome(mismatches == 0 && monotone, format!("{pairs} pairs x {} tolerances: {mismatches} mismatches; monotone in tau: {monotone}", taus.len()))
}

fn dice_by(table: &mpum::train::EvalTable, category: Option<&str>) -> f64 {
    let rows: Vec<f64> = table.summary.iter().filter(|r| category.is_none_or(|c| r.category == c)).map(|r| r.mean_dice).collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

struct Desk {
    train: Vec<Case>,
    heldout: Vec<Case>,
    projection: ModelSet,
}

fn desk_training(desk: &mut Option<Desk>) -> Outcome {
    let cases = phantom_cases(TRAIN_PHANTOMS, false);
    let held = phantom_cases(HELDOUT_PHANTOMS, false);
    let names = category_names(CATEGORIES);
    let mut lines = Vec::new();
    let (mut proj, mut mixed) = (Vec::new(), Vec::new());
    let mut first = None;
    for seed in SEEDS {
        for strategy in [Strategy::Projection, Strategy::Mixed] {
            let t0 = Instant::now();
            let set = train_desk(strategy, seed, &cases);
            let d = evaluate(&set, &held, &names, 2.0).unwrap().mean_dice();
            lines.push(format!("{strategy} seed {seed}: {d:.4} ({:.0} s)", t0.elapsed().as_secs_f64()));
            if strategy == Strategy::Projection {
                proj.push(d);
                if first.is_none() {
                    first = Some(set);
                }
            } else {
                mixed.push(d);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mp, mm) = (mean(&proj), mean(&mixed));
    for l in &lines {
        println!("    {l}");
    }
    *desk = Some(Desk { train: cases, heldout: held, projection: first.unwrap() });
    outcome(
        proj[0] >= 0.85 && mp >= mm - 0.02,
        format!("projection seed {} Dice {:.4} (>= 0.85); mean over seeds projection {mp:.4} vs mixed {mm:.4}", SEEDS[0], proj[0]),
    )
}

fn desk_model(desk: &mut Option<Desk>) -> &Desk {
    desk.get_or_insert_with(|| {
        let train = phantom_cases(TRAIN_PHANTOMS, false);
        let heldout = phantom_cases(HELDOUT_PHANTOMS, false);
        let projection = train_desk(Strategy::Projection, SEEDS[0], &train);
        Desk { train, heldout, projection }
    })
}

fn saliency_contract(desk: &mut Option<Desk>) -> Outcome {
    let untrained: Model<f32> = build_network(&desk_config(Strategy::Projection), 3).unwrap();
    let p = PHANTOM_SIZE;
    let held = phantom_cases(HELDOUT_PHANTOMS, false);
    let patch = |c: &Case| Tensor::new(vec![1, 1, p, p, p], c.volume.data.clone()).unwrap();
    let (_, rec) = untrained.forward(&patch(&held[0]), held[0].modality(), true).unwrap();
    let rec = rec.unwrap();
    let channels_ok = rec.stages.len() == STAGES.len() && rec.stages.iter().all(|t| t.shape()[0] == CATEGORIES);

    let desk = desk_model(desk);
    let model = desk.projection.model_for(Modality::Ct).unwrap();
    let deepest = STAGES.len() - 1;
    let mut ious = Vec::new();
    for cat in 0..CATEGORIES {
        let mut sum = 0.0;
        for case in &desk.heldout {
            let map = extract_saliency(model, &patch(case), case.modality(), deepest, cat).unwrap();
            let mut sorted = map.data.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let cut = sorted[sorted.len() / 10 - 1];
            let truth = case.labels.mask(cat as u16 + 1);
            let top: Vec<bool> = map.data.iter().map(|&v| v >= cut).collect();
            let inter = top.iter().zip(&truth).filter(|(a, b)| **a && **b).count();
            let union = top.iter().zip(&truth).filter(|(a, b)| **a || **b).count();
            sum += inter as f64 / union.max(1) as f64;
        }
        ious.push(sum / desk.heldout.len() as f64);
    }
    let hits = ious.iter().filter(|&&v| v > 0.2).count();
    outcome(
        channels_ok && hits >= 2,
        format!(
            "untrained channels = C at all {} stages: {channels_ok}; deepest-stage top-decile IoU per category {:.3?} ({hits}/3 > 0.2)",
            STAGES.len(),
            ious
        ),
    )
}

fn persistence() -> Outcome {
    let cfg = NetworkConfig { num_categories: 2, stages: vec![2, 4], d_t: 4, d_m: 3, patch_size: 8, modalities: MODS.to_vec(), strategy: Strategy::Projection };
    let mut data = Vec::new();
    for s in 0..2 {
        let ph = synth_phantom(s, &MODS, 16, 2).unwrap();
        for v in &ph.volumes {
            data.push(Case::new(format!("p{s}_{}", v.modality), normalize_modality(v).unwrap(), ph.labels.clone()).unwrap());
        }
    }
    let trainer = |steps: usize| {
        let mut tc = TrainConfig::new(steps, 9);
        tc.eval_every = 10;
        Trainer::new(build_network(&cfg, 9).unwrap(), tc)
    };
    let dir = tempfile::tempdir().unwrap();
    let mut straight = trainer(100);
    straight.run(&data, &data).unwrap();
    let mut half = trainer(50);
    half.run(&data, &data).unwrap();
    save_checkpoint(&half, &dir.path().join("ck")).unwrap();
    let loaded = load_checkpoint(&dir.path().join("ck")).unwrap();

    let probe = Tensor::new(vec![1, 1, 8, 8, 8], data[1].volume.data[..512].to_vec()).unwrap();
    let bits = |m: &Model<f32>| -> Vec<u32> { m.forward(&probe, Modality::Mr, false).unwrap().0.data().iter().map(|v| v.to_bits()).collect() };
    let logits_ok = bits(&half.model) == bits(&loaded.model) && loaded == half;

    let mut resumed = loaded;
    resumed.config.steps = 100;
    resumed.run(&data, &data).unwrap();
    let params_bits = |t: &Trainer| -> Vec<u32> { t.model.params.iter().flat_map(|(_, v)| v.data().iter().map(|x| x.to_bits())).collect() };
    let resume_ok = params_bits(&resumed) == params_bits(&straight) && resumed.adam == straight.adam && resumed.history == straight.history;

    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut values: Vec<f32> = (0..13 * 11 * 7).map(|_| rng.gen_range(-1e4f32..1e4)).collect();
    values[..6].copy_from_slice(&[0.0, -0.0, f32::MIN_POSITIVE, f32::MAX, -f32::MAX, 1e-40]);
    let img = NiftiImage { data: values, dims: [13, 11, 7], spacing_mm: [0.7, 1.3, 2.9], datatype: NiftiType::F32, descrip: "modality=MR".into() };
    let path = dir.path().join("probe.nii");
    write_nifti(&img, &path).unwrap();
    let back = read_nifti(&path).unwrap();
    let nifti_ok = back.dims == img.dims && back.data.iter().map(|v| v.to_bits()).eq(img.data.iter().map(|v| v.to_bits()));

    outcome(
        logits_ok && resume_ok && nifti_ok,
        format!("checkpoint probe logits bitwise: {logits_ok}; resume 50+50 = straight 100 bitwise: {resume_ok}; NIfTI float32 bitwise: {nifti_ok}"),
    )
}

fn finetune_safety(desk: &mut Option<Desk>) -> Outcome {
    let desk = desk_model(desk);
    let base = &desk.projection.trainers[0].model;
    let cases = phantom_cases(TRAIN_PHANTOMS, true);
    let held = phantom_cases(HELDOUT_PHANTOMS, true);
    let new = vec![LESION.to_string()];
    let p = PHANTOM_SIZE;

    let zero = finetune_add_categories(base, &new, None, &cases, &[], &desk_train_config(0, 0)).unwrap();
    let probe = Tensor::new(vec![1, 1, p, p, p], desk.train[1].volume.data.clone()).unwrap();
    let old = |m: &Model<f32>| -> Vec<u32> {
        let (out, _) = m.forward(&probe, desk.train[1].modality(), false).unwrap();
        out.data()[..(CATEGORIES + 1) * p * p * p].iter().map(|v| v.to_bits()).collect()
    };
    let unchanged = old(base) == old(&zero.model);

    let t = finetune_add_categories(base, &new, None, &cases, &[], &desk_train_config(FINETUNE_STEPS, 0)).unwrap();
    let mut names = category_names(CATEGORIES);
    names.push(LESION.into());
    let set = ModelSet { strategy: Strategy::Projection, trainers: vec![t] };
    let table = evaluate(&set, &held, &names, 2.0).unwrap();
    let lesion = dice_by(&table, Some(LESION));
    outcome(
        unchanged && lesion >= 0.7,
        format!("0-step old logits bitwise unchanged: {unchanged}; {LESION} Dice after {FINETUNE_STEPS} steps {lesion:.4} (old categories {:.4})", {
            let old: Vec<f64> = table.summary.iter().filter(|r| r.category != LESION).map(|r| r.mean_dice).collect();
            old.iter().sum::<f64>() / old.len() as f64
        }),
    )
}

fn viz_numerics(desk: &mut Option<Desk>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..30 {
            pts.push((0..10).map(|k| nd.sample(&mut rng) + if k == 0 { 12.0 * c as f64 } else { 0.0 }).collect());
            labels.push(c);
        }
    }
    let res = tsne2d(&pts, &TsneConfig { seed: 1, ..TsneConfig::default() }).unwrap();
    let (kl0, kl1) = (res.kl_trace.first().unwrap().1, res.kl_trace.last().unwrap().1);
    let sil = silhouette(&coords_as_rows(&res.coords), &labels).unwrap();

    let d = 54;
    let u: Vec<f64> = (0..d).map(|_| nd.sample(&mut rng)).collect();
    let v: Vec<f64> = (0..d).map(|_| nd.sample(&mut rng)).collect();
    let plane: Vec<Vec<f64>> = (0..25)
        .map(|_| {
            let (a, b) = (3.0 * nd.sample(&mut rng), nd.sample(&mut rng));
            (0..d).map(|k| 1.5 + a * u[k] + b * v[k]).collect()
        })
        .collect();
    let y = pca2d(&plane).unwrap();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut pca_err = 0.0f64;
    for i in 0..plane.len() {
        for j in 0..plane.len() {
            pca_err = pca_err.max((dist(&plane[i], &plane[j]) - dist(&y[i], &y[j])).abs());
        }
    }

    // reported only: modality separation of kernels, deepest vs shallowest stage
    let desk = desk_model(desk);
    let model = desk.projection.model_for(Modality::Ct).unwrap();
    let deepest = STAGES.len() - 1;
    let sets = flatten_kernels(model, &MODS, &[0, deepest]).unwrap();
    let sil_stage: Vec<f64> = sets.iter().map(|s| silhouette(&s.rows, &s.modality_labels()).unwrap()).collect();
    let order = if sil_stage[1] > sil_stage[0] { "deep > shallow" } else { "deep <= shallow" };

    outcome(
        kl1 < kl0 && sil > 0.5 && pca_err <= 1e-6,
        format!(
            "t-SNE KL {kl0:.3} -> {kl1:.3}; two-cluster silhouette {sil:.3}; PCA planar distance error {pca_err:.1e}; [soft] modality silhouette stage 0 {:.3}, stage {deepest} {:.3} ({order})",
            sil_stage[0], sil_stage[1]
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let mut desk: Option<Desk> = None;
    let mut failures = 0;
    let t_all = Instant::now();
    for i in 1..=10 {
        if !wanted(i) {
            continue;
        }
        let t0 = Instant::now();
        let (name, out) = match i {
            1 => ("gradient integrity", gradient_integrity()),
            2 => ("projection algebra", projection_algebra()),
            3 => ("pair taxonomy", pair_taxonomy()),
            4 => ("Fisher-Z numerics", fisher_numerics()),
            5 => ("metric oracles", metric_oracles()),
            6 => ("desk-scale training", desk_training(&mut desk)),
            7 => ("saliency contract", saliency_contract(&mut desk)),
            8 => ("persistence", persistence()),
            9 => ("fine-tuning safety", finetune_safety(&mut desk)),
            _ => ("viz numerics", viz_numerics(&mut desk)),
        };
        if !out.pass {
            failures += 1;
        }
        println!("criterion {i:>2} {} {name}: {} [{:.1} s]", if out.pass { "PASS" } else { "FAIL" }, out.detail, t0.elapsed().as_secs_f64());
    }
    println!("acceptance: {failures} failing, {:.0} s total", t_all.elapsed().as_secs_f64());
    if failures > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
