//! Quick invariant checks against independent references. Nothing is written
//! to disk.

use mpum::analytics::{enumerate_pairs, fisher_compare, RoiClass, RoiClassMap};
use mpum::metrics::{boundary, dice, surface_dice, MaskPair};
use mpum::network::{build_network, compute_loss, Model, NetworkConfig, Strategy};
use mpum::projection::{reconstruct_latent, LatentTable};
use mpum::tensor::{grad_check, Tensor, GRAD_EPS};
use mpum::volume::{decode_nifti, encode_nifti, normalize_modality, synth_phantom, NiftiImage, NiftiType};
use mpum::Modality;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Result<String, String> {
    let cfg = NetworkConfig {
        num_categories: 2,
        stages: vec![2, 3],
        d_t: 4,
        d_m: 3,
        patch_size: 4,
        modalities: vec![Modality::Ct, Modality::Mr],
        strategy: Strategy::Projection,
    };
    let mut m: Model<f64> = build_network(&cfg, 11).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let lat = Tensor::from_fn(&[2, 4], |_| rng.gen_range(-1.0..1.0));
    m.set_latents(&LatentTable::new(m.categories.clone(), lat).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::from_fn(&[1, 1, 4, 4, 4], |_| rng.gen_range(0.0..1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let y: Vec<u16> = (0..64).map(|_| rng.gen_range(0..3)).collect();
    let names = ["latents", "proj.MR", "fog.1.w1", "fog.0.b2", "head.w", "enc.1.w", "enc.0.fuse.w", "dec.0.w", "tail.w", "tail.b"];
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| m.params.get(n).expect("parameter exists").clone()).collect();
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
    .map_err(|e| e.to_string())?;
    ensure(err <= 1e-4, format!("max relative error {err:.2e}"))
}

fn projection() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 8;
    let p = Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 } + rng.gen_range(-0.1..0.1));
    let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let m: Vec<f64> = (0..n).map(|k| (0..n).map(|j| t[j] * p.data()[j * n + k]).sum()).collect();
    let back = reconstruct_latent(&m, &p, 0.0).map_err(|e| e.to_string())?;
    let err = back.iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(err <= 1e-9, format!("round-trip error {err:.1e}"))
}

fn taxonomy() -> Result<String, String> {
    let mut classes = RoiClassMap::new();
    for i in 0..83 {
        classes.insert(format!("brain_{i:03}"), RoiClass::Brain);
    }
    for i in 0..132 {
        classes.insert(format!("body_{i:03}"), RoiClass::Body);
    }
    let excl: Vec<String> = (0..12).map(|i| format!("body_{i:03}")).collect();
    let (_, c) = enumerate_pairs(&classes, &excl).map_err(|e| e.to_string())?;
    let got = [c.brain_brain, c.brain_body, c.body_body, c.total];
    ensure(got == [3403, 9960, 7140, 20503], format!("{got:?}"))
}

fn fisher() -> Result<String, String> {
    let r = fisher_compare(0.9, 33, 0.3, 55).map_err(|e| e.to_string())?;
    let ok = (r.z_score - 5.0713432056785835816).abs() < 1e-3 && ((r.p - 3.9501764627684861282e-7) / 3.95e-7).abs() < 0.05;
    ensure(ok, format!("z {:.4}, p {:.3e}", r.z_score, r.p))
}

fn brute_surface_dice(pair: &MaskPair, tol: f64) -> f64 {
    let d = pair.dims;
    let pts = |m: &[bool]| -> Vec<[f64; 3]> {
        boundary(m, d)
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| [(i % d[0]) as f64, ((i / d[0]) % d[1]) as f64, (i / (d[0] * d[1])) as f64])
            .collect()
    };
    let (a, b) = (pts(&pair.predicted), pts(&pair.reference));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let s = pair.spacing_mm;
    let near = |p: &[f64; 3], set: &[[f64; 3]]| set.iter().any(|q| (0..3).map(|k| ((p[k] - q[k]) * s[k]).powi(2)).sum::<f64>() <= tol * tol);
    let hits = a.iter().filter(|p| near(p, &b)).count() + b.iter().filter(|p| near(p, &a)).count();
    hits as f64 / (a.len() + b.len()) as f64
}

fn metrics() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = [8, 8, 8];
    for _ in 0..5 {
        let a: Vec<bool> = (0..512).map(|_| rng.gen_bool(0.3)).collect();
        let b: Vec<bool> = (0..512).map(|_| rng.gen_bool(0.3)).collect();
        let both = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let want = 2.0 * both as f64 / (a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count()) as f64;
        let pair = MaskPair::new(a, b, d, [1.0, 1.5, 2.0]).map_err(|e| e.to_string())?;
        let got = dice(&pair);
        if got != want {
            return Err(format!("dice {got} vs {want}"));
        }
        let sd = surface_dice(&pair, 2.0).map_err(|e| e.to_string())?;
        let bd = brute_surface_dice(&pair, 2.0);
        if sd != bd {
            return Err(format!("surface dice {sd} vs {bd}"));
        }
    }
    Ok("5 random pairs exact".into())
}

fn nifti() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = NiftiImage {
        data: (0..512).map(|_| rng.gen_range(-1e3f32..1e3)).collect(),
        dims: [8, 8, 8],
        spacing_mm: [1.0, 2.0, 3.0],
        datatype: NiftiType::F32,
        descrip: "modality=CT".into(),
    };
    let back = decode_nifti(&encode_nifti(&img).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(back == img, "float32 round-trip".into())
}

fn phantom() -> Result<String, String> {
    let ph = synth_phantom(0, &[Modality::Ct, Modality::Mr], 32, 3).map_err(|e| e.to_string())?;
    let mean = |m: Modality| -> Result<f64, String> {
        let v = normalize_modality(ph.volume(m).expect("requested modality")).map_err(|e| e.to_string())?;
        let inside: Vec<f64> = ph.labels.labels.iter().zip(&v.data).filter(|(&l, _)| l == 1).map(|(_, &x)| x as f64).collect();
        Ok(inside.iter().sum::<f64>() / inside.len() as f64)
    };
    let diff = (mean(Modality::Ct)? - mean(Modality::Mr)?).abs();
    ensure(diff >= 0.3, format!("category 1 CT/MR contrast {diff:.3}"))
}

/// Runs every check, printing one line each; true when all pass.
pub fn run() -> bool {
    let checks: [(&str, Check); 7] = [
        ("gradients", gradients),
        ("projection", projection),
        ("pair-taxonomy", taxonomy),
        ("fisher-z", fisher),
        ("metrics", metrics),
        ("nifti", nifti),
        ("phantom", phantom),
    ];
    let mut all = true;
    for (name, f) in checks {
        match f() {
            Ok(d) => println!("ok    {name:<14} {d}"),
            Err(d) => {
                all = false;
                println!("FAIL  {name:<14} {d}");
            }
        }
    }
    all
}
