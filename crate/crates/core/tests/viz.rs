use mpum::network::{build_network, Model, NetworkConfig, Strategy};
use mpum::viz::*;
use mpum::Modality;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn jacobi_reconstructs_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 7;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = rng.gen_range(-1.0..1.0);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let (vals, vecs) = jacobi_eigen(&a, n);
    assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    for i in 0..n {
        for j in 0..n {
            let r: f64 = (0..n).map(|k| vecs[i * n + k] * vals[k] * vecs[j * n + k]).sum();
            assert!((r - a[i * n + j]).abs() < 1e-12);
        }
    }
}

fn planted_plane(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let u: Vec<f64> = (0..d).map(|_| nd.sample(&mut rng)).collect();
    let v: Vec<f64> = (0..d).map(|_| nd.sample(&mut rng)).collect();
    let offset: Vec<f64> = (0..d).map(|_| nd.sample(&mut rng)).collect();
    (0..n)
        .map(|_| {
            let (a, b) = (nd.sample(&mut rng) * 3.0, nd.sample(&mut rng));
            (0..d).map(|k| offset[k] + a * u[k] + b * v[k]).collect()
        })
        .collect()
}

#[test]
fn pca_preserves_planar_distances() {
    for seed in 0..5 {
        let pts = planted_plane(seed, 20, 54);
        let y = pca2d(&pts).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert!((dist(&pts[i], &pts[j]) - dist(&y[i], &y[j])).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn pca_degenerate_and_translation() {
    let same = vec![vec![1.0, 2.0, 3.0]; 4];
    assert!(pca2d(&same).unwrap().iter().all(|p| p[0] == 0.0 && p[1] == 0.0));
    assert!(pca2d(&same[..2]).is_err());

    let pts = planted_plane(7, 10, 6);
    let shifted: Vec<Vec<f64>> = pts.iter().map(|r| r.iter().map(|v| v + 5.0).collect()).collect();
    let (a, b) = (pca2d(&pts).unwrap(), pca2d(&shifted).unwrap());
    for (p, q) in a.iter().zip(&b) {
        assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
    }
}

fn two_clusters(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..30 {
            pts.push((0..10).map(|k| nd.sample(&mut rng) + if k == 0 { 12.0 * c as f64 } else { 0.0 }).collect());
            labels.push(c);
        }
    }
    (pts, labels)
}

#[test]
fn affinities_calibrated_and_symmetric() {
    let (pts, _) = two_clusters(2);
    let perp = 15.0;
    let (_, ent) = conditional_affinities(&pts, perp).unwrap();
    assert!(ent.iter().all(|h| (h - perp.ln()).abs() <= ENTROPY_TOL));
    let p = joint_affinities(&pts, perp).unwrap();
    let n = pts.len();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for i in 0..n {
        for j in 0..n {
            assert!(p[i * n + j] >= 0.0);
            assert_eq!(p[i * n + j], p[j * n + i]);
        }
    }
    assert!(conditional_affinities(&pts[..4], 5.0).is_err());
}

#[test]
fn tsne_separates_clusters() {
    let (pts, labels) = two_clusters(3);
    let cfg = TsneConfig { seed: 4, ..TsneConfig::default() };
    let res = tsne2d(&pts, &cfg).unwrap();
    let first = res.kl_trace.first().unwrap().1;
    let last = res.kl_trace.last().unwrap().1;
    assert!(last < first, "{last} vs {first}");
    assert!(silhouette(&coords_as_rows(&res.coords), &labels).unwrap() > 0.5);
    assert_eq!(res.perplexity, 30.0_f64.min(59.0 / 3.0));
    let again = tsne2d(&pts, &cfg).unwrap();
    assert_eq!(res.coords, again.coords);
    assert!(tsne2d(&pts[..4], &cfg).is_err());
}

#[test]
fn silhouette_examples() {
    let pts = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
    let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
    let expect = [(10.5 - 1.0) / 10.5, (9.5 - 1.0) / 9.5, (9.5 - 1.0) / 9.5, (10.5 - 1.0) / 10.5];
    assert!((s - expect.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    assert!(silhouette(&pts, &[0, 0, 0, 0]).is_err());
}

fn kernel_model(strategy: Strategy, modalities: Vec<Modality>) -> Model<f32> {
    let cfg = NetworkConfig { num_categories: 5, stages: vec![2, 3], d_t: 4, d_m: 3, patch_size: 4, modalities, strategy };
    build_network(&cfg, 1).unwrap()
}

#[test]
fn flatten_counts_and_forced_equality() {
    let all = vec![Modality::Ct, Modality::Mr, Modality::Pet];
    let mut m = kernel_model(Strategy::Projection, all.clone());
    let sets = flatten_kernels(&m, &all, &[0, 1]).unwrap();
    assert_eq!(sets[1].len(), 15);
    assert!(sets[1].rows.iter().all(|r| r.len() == 3 * 27));
    assert!(sets[0].rows.iter().all(|r| r.len() == 2 * 27));
    assert_eq!(sets[0].modality_labels()[..6], [0, 0, 0, 0, 0, 1]);

    let ct = m.params.get("proj.CT").unwrap().clone();
    m.params.insert("proj.MR", ct);
    let sets = flatten_kernels(&m, &[Modality::Ct, Modality::Mr], &[1]).unwrap();
    assert_eq!(sets[0].rows[..5], sets[0].rows[5..]);

    assert!(flatten_kernels(&kernel_model(Strategy::Mixed, all), &[Modality::Ct], &[0]).is_err());
}

#[test]
fn csv_outputs() {
    let tags = vec![KernelTag { modality: Modality::Ct, stage: 2, category: "liver".into() }];
    let mut buf = Vec::new();
    write_embedding_csv(&tags, &[[1.5, -2.0]], "pca", &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "modality,stage,category,x,y,method\nCT,2,liver,1.5,-2,pca\n");
    let mut buf = Vec::new();
    write_kl_trace_csv(&[(0, 1.0), (10, 0.5)], &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
}
