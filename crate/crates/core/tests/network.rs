use mpum::network::{
    build_network, compute_loss, cross_entropy, extract_saliency, min_max_normalize, predict_volume, soft_dice_loss, Model, NetworkConfig, Strategy,
};
use mpum::tensor::{grad_check, Graph, Tensor, GRAD_EPS};
use mpum::volume::Volume;
use mpum::{Error, Modality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(strategy: Strategy, modalities: Vec<Modality>) -> NetworkConfig {
    NetworkConfig { num_categories: 2, stages: vec![2, 3], d_t: 4, d_m: 3, patch_size: 4, modalities, strategy }
}

fn patch(seed: u64, p: usize, b: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, 1, p, p, p], |_| rng.gen_range(0.0..1.0))
}

fn labels(seed: u64, n: usize, classes: u16) -> Vec<u16> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

#[test]
fn parameter_count_matches_formula() {
    for strategy in [Strategy::Mixed, Strategy::Projection] {
        let cfg = NetworkConfig { strategy, ..NetworkConfig::default() };
        let m: Model<f32> = build_network(&cfg, 0).unwrap();
        assert_eq!(m.parameter_count(), cfg.parameter_count());
    }
    let cfg = tiny(Strategy::Specific, vec![Modality::Pet]);
    let m: Model<f64> = build_network(&cfg, 0).unwrap();
    assert_eq!(m.parameter_count(), cfg.parameter_count());
}

#[test]
fn build_is_deterministic() {
    let cfg = tiny(Strategy::Projection, vec![Modality::Ct, Modality::Mr]);
    let a: Model<f32> = build_network(&cfg, 7).unwrap();
    let b: Model<f32> = build_network(&cfg, 7).unwrap();
    let c: Model<f32> = build_network(&cfg, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn config_validation() {
    let mut cfg = tiny(Strategy::Specific, vec![Modality::Ct, Modality::Mr]);
    assert!(cfg.validate().is_err());
    cfg.modalities = vec![Modality::Ct];
    cfg.validate().unwrap();
    cfg.patch_size = 6;
    cfg.stages = vec![2, 2, 2];
    assert!(cfg.validate().is_err());
    let json = r#"{"num_categories": 2, "modalities": ["CT"], "strategy": "mixed", "extra": 1}"#;
    assert!(serde_json::from_str::<NetworkConfig>(json).is_err());
    let json = r#"{"num_categories": 2, "modalities": ["CT"], "strategy": "mixed"}"#;
    let cfg: NetworkConfig = serde_json::from_str(json).unwrap();
    assert_eq!(cfg.stages, vec![16, 32, 64, 128]);
    assert_eq!(cfg.patch_size, 128);
}

#[test]
fn output_shape_and_saliency() {
    let cfg = NetworkConfig { patch_size: 8, ..tiny(Strategy::Projection, vec![Modality::Ct, Modality::Mr]) };
    let m: Model<f64> = build_network(&cfg, 1).unwrap();
    let (y, sal) = m.forward(&patch(2, 8, 2), Modality::Mr, true).unwrap();
    assert_eq!(y.shape(), &[2, 3, 8, 8, 8]);
    let sal = sal.unwrap();
    assert_eq!(sal.stages.len(), 2);
    assert_eq!(sal.stages[0].shape(), &[2, 8, 8, 8]);
    assert_eq!(sal.stages[1].shape(), &[2, 4, 4, 4]);
    assert!(y.all_finite());
    assert!(m.forward(&patch(2, 4, 1), Modality::Mr, false).is_err());
}

#[test]
fn routing_rules() {
    let mixed: Model<f64> = build_network(&tiny(Strategy::Mixed, vec![Modality::Ct, Modality::Mr]), 3).unwrap();
    let x = patch(4, 4, 1);
    let a = mixed.forward(&x, Modality::Ct, false).unwrap().0;
    for m in [Modality::Mr, Modality::Pet, Modality::Shared] {
        assert_eq!(mixed.forward(&x, m, false).unwrap().0, a);
    }

    let spec: Model<f64> = build_network(&tiny(Strategy::Specific, vec![Modality::Ct]), 3).unwrap();
    spec.forward(&x, Modality::Ct, false).unwrap();
    assert!(matches!(spec.forward(&x, Modality::Mr, false), Err(Error::ModalityMismatch { .. })));

    let proj: Model<f64> = build_network(&tiny(Strategy::Projection, vec![Modality::Ct, Modality::Mr]), 3).unwrap();
    let ct = proj.forward(&x, Modality::Ct, false).unwrap().0;
    let mr = proj.forward(&x, Modality::Mr, false).unwrap().0;
    assert!(ct.max_abs_diff(&mr) > 1e-9);
    assert!(matches!(proj.forward(&x, Modality::Pet, false), Err(Error::UnknownModality(_))));
}

#[test]
fn kernels_match_forward_route() {
    let m: Model<f64> = build_network(&tiny(Strategy::Projection, vec![Modality::Ct, Modality::Mr]), 5).unwrap();
    let k = m.kernels(Modality::Ct, 1).unwrap();
    assert_eq!(k.shape(), &[2, 3, 3, 3, 3]);
    assert!(m.kernels(Modality::Ct, 2).is_err());
    assert!(k.max_abs_diff(&m.kernels(Modality::Mr, 1).unwrap()) > 0.0);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let cfg = tiny(Strategy::Projection, vec![Modality::Ct, Modality::Mr]);
    let mut m: Model<f64> = build_network(&cfg, 11).unwrap();
    // unit-scale latents keep every probed gradient well above roundoff
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let lat = Tensor::from_fn(&[2, 4], |_| rng.gen_range(-1.0..1.0));
    m.set_latents(&mpum::projection::LatentTable::new(m.categories.clone(), lat).unwrap()).unwrap();
    let x = patch(12, 4, 1);
    let y = labels(13, 64, 3);
    let names = ["latents", "proj.MR", "fog.1.w1", "fog.0.b2", "head.w", "enc.1.w", "enc.0.fuse.w", "dec.0.w", "tail.w", "tail.b"];
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| m.params.get(n).unwrap().clone()).collect();
    let err = grad_check(
        |g, vars| {
            let given: Vec<(&str, _)> = names.iter().copied().zip(vars.iter().copied()).collect();
            let b = m.params.bind_with(g, &given)?;
            let xv = g.constant(x.clone())?;
            let out = m.forward_graph(g, &b, xv, Modality::Mr)?;
            compute_loss(g, out.logits, &y)
        },
        &inputs,
        GRAD_EPS,
    )
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn loss_values_against_direct_formulas() {
    let (b, c, n) = (2, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = Tensor::from_fn(&[b, c, n], |_| rng.gen_range(-2.0..2.0));
    let y = labels(22, b * n, c as u16);

    let mut ce = 0.0;
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut ysum = vec![0.0; c];
    for bi in 0..b {
        for v in 0..n {
            let z: Vec<f64> = (0..c).map(|k| logits.at(&[bi, k, v])).collect();
            let lse = z.iter().map(|a| a.exp()).sum::<f64>().ln();
            let l = y[bi * n + v] as usize;
            ce -= z[l] - lse;
            for k in 0..c {
                let p = (z[k] - lse).exp();
                psum[k] += p;
                if k == l {
                    inter[k] += p;
                    ysum[k] += 1.0;
                }
            }
        }
    }
    ce /= (b * n) as f64;
    let dice = 1.0 - (1..c).map(|k| (2.0 * inter[k] + 1.0) / (psum[k] + ysum[k] + 1.0)).sum::<f64>() / (c - 1) as f64;

    let mut g = Graph::new();
    let lv = g.constant(logits).unwrap();
    let ce_v = cross_entropy(&mut g, lv, &y).unwrap();
    let dice_v = soft_dice_loss(&mut g, lv, &y).unwrap();
    let total = compute_loss(&mut g, lv, &y).unwrap();
    assert!((g.value(ce_v).item() - ce).abs() < 1e-12);
    assert!((g.value(dice_v).item() - dice).abs() < 1e-12);
    assert!((g.value(total).item() - ce - dice).abs() < 1e-12);
}

#[test]
fn loss_examples() {
    let (c, n) = (4, 64);
    let y = labels(30, n, c as u16);
    let peaked = Tensor::from_fn(&[1, c, n], |i| if y[i % n] as usize == i / n { 10.0 } else { 0.0 });
    let mut g = Graph::new();
    let lv = g.constant(peaked).unwrap();
    let loss = compute_loss(&mut g, lv, &y).unwrap();
    assert!(g.value(loss).item() < 0.05);

    let y = labels(31, n, 2);
    let uniform = Tensor::<f64>::zeros(&[1, 2, n]);
    let mut g = Graph::new();
    let lv = g.constant(uniform).unwrap();
    let ce = cross_entropy(&mut g, lv, &y).unwrap();
    assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn adding_categories_preserves_existing_logits() {
    let cfg = tiny(Strategy::Projection, vec![Modality::Ct, Modality::Mr]);
    let m: Model<f32> = build_network(&cfg, 9).unwrap();
    let x = patch(10, 4, 1).cast::<f32>();
    let before = m.forward(&x, Modality::Ct, false).unwrap().0;
    let mut ext = m.clone();
    ext.add_categories(&["lesion".to_string()], None, 3).unwrap();
    assert_eq!(ext.num_categories(), 3);
    assert_eq!(ext.parameter_count(), ext.config.parameter_count());
    let after = ext.forward(&x, Modality::Ct, false).unwrap().0;
    assert_eq!(after.shape(), &[1, 4, 4, 4, 4]);
    assert_eq!(&after.data()[..before.numel()], before.data());
    assert!(ext.add_categories(&["category_1".to_string()], None, 3).is_err());
}

#[test]
fn sliding_window_covers_odd_volumes() {
    let cfg = NetworkConfig { patch_size: 4, ..tiny(Strategy::Mixed, vec![Modality::Ct]) };
    let m: Model<f32> = build_network(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [7, 3, 5];
    let vol = Volume::new((0..105).map(|_| rng.gen()).collect(), dims, [2.0; 3], Modality::Ct).unwrap();
    let lab = predict_volume(&m, &vol, Modality::Ct).unwrap();
    assert_eq!(lab.dims, dims);
    assert!(lab.labels.iter().all(|&l| l <= 2));
    assert_eq!(lab.category_table.len(), 3);

    // a volume equal to one patch reproduces the single forward pass
    let one = Volume::new((0..64).map(|_| rng.gen()).collect(), [4, 4, 4], [2.0; 3], Modality::Ct).unwrap();
    let lab = predict_volume(&m, &one, Modality::Ct).unwrap();
    let x = Tensor::new(vec![1, 1, 4, 4, 4], one.data.clone()).unwrap();
    let logits = m.forward(&x, Modality::Ct, false).unwrap().0;
    let expect = mpum::network::argmax_labels(&logits.reshape(&[3, 4, 4, 4]).unwrap());
    assert_eq!(lab.labels, expect);
}

#[test]
fn saliency_is_normalized() {
    let cfg = NetworkConfig { patch_size: 8, ..tiny(Strategy::Projection, vec![Modality::Ct, Modality::Mr]) };
    let m: Model<f32> = build_network(&cfg, 4).unwrap();
    let x = patch(5, 8, 1).cast::<f32>();
    let v = extract_saliency(&m, &x, Modality::Ct, 1, 1).unwrap();
    assert_eq!(v.dims, [8, 8, 8]);
    let lo = v.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = v.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    assert!(lo == 0.0 && (hi == 1.0 || hi == 0.0));
    assert!(extract_saliency(&m, &x, Modality::Ct, 2, 0).is_err());
    assert!(extract_saliency(&m, &x, Modality::Ct, 0, 2).is_err());

    let mut flat = vec![3.0f32; 5];
    min_max_normalize(&mut flat);
    assert!(flat.iter().all(|&v| v == 0.0));
}
