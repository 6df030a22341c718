//! Two-dimensional views of controller-generated kernels.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::network::{Model, Strategy};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTag {
    pub modality: Modality,
    pub stage: usize,
    pub category: String,
}

/// Flattened `[H_s, 3, 3, 3]` kernels of one stage, one row per
/// (modality, category).
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPointSet {
    pub stage: usize,
    pub rows: Vec<Vec<f64>>,
    pub tags: Vec<KernelTag>,
}

impl KernelPointSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Modality index of each row, in order of first appearance.
    pub fn modality_labels(&self) -> Vec<usize> {
        let mut seen: Vec<Modality> = Vec::new();
        self.tags
            .iter()
            .map(|t| match seen.iter().position(|&m| m == t.modality) {
                Some(i) => i,
                None => {
                    seen.push(t.modality);
                    seen.len() - 1
                }
            })
            .collect()
    }
}

pub fn flatten_kernels<T: Scalar>(model: &Model<T>, modalities: &[Modality], stages: &[usize]) -> Result<Vec<KernelPointSet>> {
    if model.config.strategy != Strategy::Projection {
        return Err(Error::Config(format!("{} models have no per-modality kernels", model.config.strategy)));
    }
    let mut out = Vec::new();
    for &stage in stages {
        let mut set = KernelPointSet { stage, rows: Vec::new(), tags: Vec::new() };
        for &m in modalities {
            let k = model.kernels(m, stage)?;
            let c = k.shape()[0];
            let width = k.numel() / c;
            for (ci, row) in k.data().chunks(width).enumerate() {
                set.rows.push(row.iter().map(|v| v.f64()).collect());
                set.tags.push(KernelTag { modality: m, stage, category: model.categories[ci].clone() });
            }
        }
        out.push(set);
    }
    Ok(out)
}

/// Eigen-decomposition of a symmetric `n x n` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues (descending) and eigenvectors as columns.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &i) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + col] = v[k * n + i];
        }
    }
    (vals, vecs)
}

fn check_rows(rows: &[Vec<f64>], min: usize, op: &'static str) -> Result<usize> {
    if rows.len() < min {
        return Err(Error::Domain { op, detail: format!("need at least {min} points, got {}", rows.len()) });
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape(op, "rows must share one nonzero length"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(d)
}

/// Principal-component scores on the top two axes. Each axis is signed so
/// that its largest-magnitude loading is positive.
pub fn pca2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let d = check_rows(rows, 3, "pca2d")?;
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let x: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let g: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum();
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
    }
    let (vals, vecs) = jacobi_eigen(&gram, n);
    let scale = vals[0].abs().max(f64::MIN_POSITIVE);
    let mut out = vec![[0.0; 2]; n];
    for axis in 0..2.min(n) {
        let lambda = vals[axis];
        if lambda <= 1e-12 * scale || lambda <= 0.0 {
            continue;
        }
        let s = lambda.sqrt();
        // loading = X^T u / sqrt(lambda); score = u * sqrt(lambda)
        let mut loading = vec![0.0; d];
        for i in 0..n {
            let u = vecs[i * n + axis];
            for (l, v) in loading.iter_mut().zip(&x[i]) {
                *l += u * v / s;
            }
        }
        let big = loading.iter().cloned().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if big < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[i][axis] = sign * vecs[i * n + axis] * s;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self { perplexity: 30.0, iterations: 1000, learning_rate: 200.0, exaggeration: 12.0, exaggeration_iters: 250, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// `(iteration, KL(P || Q))`, starting with the initial layout.
    pub kl_trace: Vec<(usize, f64)>,
    pub perplexity: f64,
}

pub const ENTROPY_TOL: f64 = 1e-5;

/// Conditional affinities `p_{j|i}` calibrated to `perplexity`, row-major,
/// with each row's entropy (nats).
pub fn conditional_affinities(rows: &[Vec<f64>], perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_rows(rows, 2, "tsne")?;
    let n = rows.len();
    if !(perplexity >= 1.0) || perplexity > (n - 1) as f64 {
        return Err(Error::Domain { op: "tsne", detail: format!("perplexity {perplexity} infeasible for {n} points") });
    }
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut entropies = vec![0.0; n];
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let dmin = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
        let eval = |beta: f64, out: &mut [f64]| -> f64 {
            let mut sum = 0.0;
            for j in 0..n {
                out[j] = if j == i { 0.0 } else { (-beta * (row[j] - dmin)).exp() };
                sum += out[j];
            }
            let mut h = 0.0;
            for j in 0..n {
                out[j] /= sum;
                if out[j] > 0.0 {
                    h -= out[j] * out[j].ln();
                }
            }
            h
        };
        let mut out = vec![0.0; n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0 / row.iter().sum::<f64>().max(1e-300) * n as f64;
        let mut h = eval(beta, &mut out);
        for _ in 0..500 {
            if (h - target).abs() <= ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            h = eval(beta, &mut out);
        }
        if (h - target).abs() > ENTROPY_TOL {
            return Err(Error::Domain { op: "tsne", detail: format!("perplexity calibration failed for point {i}") });
        }
        entropies[i] = h;
        p[i * n..(i + 1) * n].copy_from_slice(&out);
    }
    Ok((p, entropies))
}

/// Symmetrised joint affinities `(p_{j|i} + p_{i|j}) / 2n`.
pub fn joint_affinities(rows: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = rows.len();
    let (cond, _) = conditional_affinities(rows, perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                num[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
                z += num[i * n + j];
            }
        }
    }
    let mut kl = 0.0;
    for k in 0..n * n {
        if p[k] > 0.0 {
            kl += p[k] * (p[k] / (num[k] / z).max(1e-300)).ln();
        }
    }
    kl
}

/// Perplexity actually used for `n` points.
pub fn effective_perplexity(requested: f64, n: usize) -> f64 {
    requested.min((n as f64 - 1.0) / 3.0)
}

/// Smallest point set t-SNE accepts.
pub const TSNE_MIN_POINTS: usize = 5;

/// Exact t-SNE with early exaggeration, momentum switching and per-coordinate gains.
pub fn tsne2d(rows: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    check_rows(rows, TSNE_MIN_POINTS, "tsne")?;
    let n = rows.len();
    let perplexity = effective_perplexity(cfg.perplexity, n);
    let p = joint_affinities(rows, perplexity)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-2).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut trace = vec![(0, kl_divergence(&p, &y))];
    let mut num = vec![0.0; n * n];
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                num[i * n + j] = if i == j {
                    0.0
                } else {
                    let dx = y[i][0] - y[j][0];
                    let dy = y[i][1] - y[j][1];
                    1.0 / (1.0 + dx * dx + dy * dy)
                };
                z += num[i * n + j];
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                let w = (exag * p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                g[0] += 4.0 * w * (y[i][0] - y[j][0]);
                g[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (g[k] > 0.0) != (vel[i][k] > 0.0) { gains[i][k] + 0.2 } else { (gains[i][k] * 0.8).max(0.01) };
                vel[i][k] = momentum * vel[i][k] - cfg.learning_rate * gains[i][k] * g[k];
            }
        }
        let mut mean = [0.0; 2];
        for i in 0..n {
            for k in 0..2 {
                y[i][k] += vel[i][k];
                mean[k] += y[i][k] / n as f64;
            }
        }
        for yi in y.iter_mut() {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
        if (it + 1) % 10 == 0 || it + 1 == cfg.iterations {
            trace.push((it + 1, kl_divergence(&p, &y)));
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "tsne" });
    }
    Ok(TsneResult { coords: y, kl_trace: trace, perplexity })
}

/// Mean silhouette coefficient under Euclidean distance; points alone in
/// their cluster score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::shape("silhouette", format!("{} points, {} labels", points.len(), labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if labels.iter().collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return Err(Error::Domain { op: "silhouette", detail: "need at least two clusters".into() });
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k).filter(|&c| c != own && counts[c] > 0).map(|c| sums[c] / counts[c] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

pub fn coords_as_rows(c: &[[f64; 2]]) -> Vec<Vec<f64>> {
    c.iter().map(|p| p.to_vec()).collect()
}

/// `modality,stage,category,x,y,method` rows.
pub fn write_embedding_csv(tags: &[KernelTag], coords: &[[f64; 2]], method: &str, w: impl Write) -> Result<()> {
    if tags.len() != coords.len() {
        return Err(Error::shape("embedding csv", format!("{} tags, {} points", tags.len(), coords.len())));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["modality", "stage", "category", "x", "y", "method"])?;
    for (t, c) in tags.iter().zip(coords) {
        out.write_record([t.modality.to_string(), t.stage.to_string(), t.category.clone(), c[0].to_string(), c[1].to_string(), method.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("embedding", e))
}

pub fn write_kl_trace_csv(trace: &[(usize, f64)], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "kl"])?;
    for (i, kl) in trace {
        out.write_record([i.to_string(), kl.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("kl trace", e))
}
