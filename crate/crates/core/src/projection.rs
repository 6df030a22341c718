//! Per-category latent features, modality and external projections, ridge
//! inverse projection and the feature operator generator (FOG) that turns
//! projected features into 3x3x3 kernels.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const LATENT_INIT_STD: f64 = 0.02;
pub const FOG_HIDDEN: usize = 128;

/// One latent row per category.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable<T> {
    names: Vec<String>,
    latents: Tensor<T>,
}

impl<T: Scalar> LatentTable<T> {
    pub fn new(names: Vec<String>, latents: Tensor<T>) -> Result<Self> {
        let s = latents.shape();
        if s.len() != 2 || s[0] != names.len() || s[0] == 0 || s[1] == 0 {
            return Err(Error::shape("latent table", format!("{} names vs latents {:?}", names.len(), s)));
        }
        if !latents.all_finite() {
            return Err(Error::NonFinite { op: "latent table" });
        }
        check_unique(&names)?;
        Ok(Self { names, latents })
    }

    /// I.i.d. normal rows with standard deviation [`LATENT_INIT_STD`].
    pub fn random(names: Vec<String>, d_t: usize, rng: &mut impl Rng) -> Result<Self> {
        let t = normal_tensor(&[names.len(), d_t], LATENT_INIT_STD, rng);
        Self::new(names, t)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn latents(&self) -> &Tensor<T> {
        &self.latents
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn d_t(&self) -> usize {
        self.latents.shape()[1]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn into_parts(self) -> (Vec<String>, Tensor<T>) {
        (self.names, self.latents)
    }
}

pub(crate) fn check_unique(names: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::DuplicateCategory(n.clone()));
        }
    }
    Ok(())
}

pub(crate) fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

/// Projection matrices keyed by modality and by external source.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet<T> {
    d_t: usize,
    modality: BTreeMap<Modality, Tensor<T>>,
    external: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ProjectionSet<T> {
    pub fn new(d_t: usize) -> Self {
        Self { d_t, modality: BTreeMap::new(), external: BTreeMap::new() }
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    fn check(&self, p: &Tensor<T>) -> Result<()> {
        if p.ndim() != 2 || p.shape()[0] != self.d_t {
            return Err(Error::shape("projection", format!("expected [{}, _], got {:?}", self.d_t, p.shape())));
        }
        Ok(())
    }

    /// Adds `P_m`. `SHARED` cannot coexist with imaging modalities.
    pub fn insert_modality(&mut self, m: Modality, p: Tensor<T>) -> Result<()> {
        self.check(&p)?;
        let shared_conflict =
            if m == Modality::Shared { self.modality.keys().any(|&k| k != Modality::Shared) } else { self.modality.contains_key(&Modality::Shared) };
        if shared_conflict {
            return Err(Error::Config("SHARED projection cannot be combined with per-modality projections".into()));
        }
        if let Some(d) = self.modality.values().next().map(|q| q.shape()[1]) {
            if d != p.shape()[1] && !self.modality.contains_key(&m) {
                return Err(Error::shape("projection", format!("d_m {} vs {}", p.shape()[1], d)));
            }
        }
        self.modality.insert(m, p);
        Ok(())
    }

    pub fn insert_external(&mut self, source: impl Into<String>, p: Tensor<T>) -> Result<()> {
        self.check(&p)?;
        self.external.insert(source.into(), p);
        Ok(())
    }

    pub fn modality(&self, m: Modality) -> Result<&Tensor<T>> {
        self.modality.get(&m).ok_or_else(|| Error::UnknownModality(m.to_string()))
    }

    pub fn external(&self, source: &str) -> Result<&Tensor<T>> {
        self.external.get(source).ok_or_else(|| Error::Config(format!("no projection for external source {source}")))
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.modality.keys().copied()
    }
}

/// `M_m = T P_m`, one row per category.
pub fn project_latent<T: Scalar>(latents: &LatentTable<T>, proj: &ProjectionSet<T>, modality: Modality) -> Result<Tensor<T>> {
    let p = proj.modality(modality)?;
    let mut g = Graph::new();
    let t = g.constant(latents.latents().clone())?;
    let p = g.constant(p.clone())?;
    let m = g.matmul(t, p)?;
    Ok(g.value(m).clone())
}

/// Solves `a x = b` for square `a` (row-major, `n x n`) by Gaussian
/// elimination with partial pivoting.
pub fn solve_linear(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = scale * n as f64 * f64::EPSILON;
    for col in 0..n {
        let (piv, pval) = (col..n).map(|r| (r, m[r * n + col].abs())).fold((col, -1.0), |best, c| if c.1 > best.1 { c } else { best });
        if pval <= tol {
            return Err(Error::Singular { column: col, pivot: pval });
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            x.swap(col, piv);
        }
        let d = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for k in col + 1..n {
            s -= m[col * n + k] * x[k];
        }
        x[col] = s / m[col * n + col];
    }
    Ok(x)
}

/// Ridge inverse projection: the minimiser of `|T P - m|^2 + ridge |T|^2`,
/// from the normal equations `(P P^T + ridge I) T^T = P m^T`.
pub fn reconstruct_latent(m: &[f64], p: &Tensor<f64>, ridge: f64) -> Result<Vec<f64>> {
    if p.ndim() != 2 || p.shape()[1] != m.len() {
        return Err(Error::shape("reconstruct_latent", format!("m of length {} vs P {:?}", m.len(), p.shape())));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Domain { op: "reconstruct_latent", detail: format!("ridge {ridge} < 0") });
    }
    let (dt, dm) = (p.shape()[0], p.shape()[1]);
    let pd = p.data();
    let mut a = vec![0.0; dt * dt];
    for i in 0..dt {
        for j in 0..dt {
            a[i * dt + j] = (0..dm).map(|k| pd[i * dm + k] * pd[j * dm + k]).sum();
        }
        a[i * dt + i] += ridge;
    }
    let rhs: Vec<f64> = (0..dt).map(|i| (0..dm).map(|k| pd[i * dm + k] * m[k]).sum()).collect();
    solve_linear(&a, &rhs, dt)
}

/// Category features from one external model (stand-in for text/image
/// encoder embeddings).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEmbeddingSet {
    pub source_id: String,
    pub dim: usize,
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl ExternalEmbeddingSet {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in &self.embeddings {
            if v.len() != self.dim {
                return Err(Error::shape("external embedding", format!("{}:{} has length {}, expected {}", self.source_id, name, v.len(), self.dim)));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "external embedding" });
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn row(&self, category: &str) -> Result<&[f64]> {
        self.embeddings.get(category).map(Vec::as_slice).ok_or_else(|| Error::CoverageGap { source_id: self.source_id.clone(), category: category.to_string() })
    }
}

/// Averages the inverse projections of every external set, per category.
///
/// Sets are combined in `source_id` order so the result does not depend on
/// the order they are passed in.
pub fn aggregate_external(sets: &[ExternalEmbeddingSet], names: &[String], proj: &ProjectionSet<f64>, ridge: f64) -> Result<LatentTable<f64>> {
    if sets.is_empty() {
        return Err(Error::Config("aggregate_external needs at least one embedding set".into()));
    }
    let mut order: Vec<&ExternalEmbeddingSet> = sets.iter().collect();
    order.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    let dt = proj.d_t();
    let mut out = vec![0.0; names.len() * dt];
    for set in &order {
        set.validate()?;
        let p = proj.external(&set.source_id)?;
        if p.shape()[1] != set.dim {
            return Err(Error::shape("aggregate_external", format!("{} has dim {} but P is {:?}", set.source_id, set.dim, p.shape())));
        }
        for (c, name) in names.iter().enumerate() {
            let t = reconstruct_latent(set.row(name)?, p, ridge)?;
            for (o, v) in out[c * dt..(c + 1) * dt].iter_mut().zip(t) {
                *o += v;
            }
        }
    }
    let n = order.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    LatentTable::new(names.to_vec(), Tensor::new(vec![names.len(), dt], out)?)
}

/// Parameters of one FOG stage: `d_m -> hidden -> channels * 27`.
#[derive(Clone, Debug, PartialEq)]
pub struct FogStage<T> {
    pub channels: usize,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> FogStage<T> {
    pub fn random(d_m: usize, hidden: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let out = channels * 27;
        Self {
            channels,
            w1: normal_tensor(&[d_m, hidden], (2.0 / d_m as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: normal_tensor(&[hidden, out], (1.0 / hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[out]),
        }
    }
}

/// The feature operator generator: one small MLP per encoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureOperatorGenerator<T> {
    pub stages: Vec<FogStage<T>>,
}

impl<T: Scalar> FeatureOperatorGenerator<T> {
    pub fn random(d_m: usize, channels: &[usize], rng: &mut impl Rng) -> Self {
        Self { stages: channels.iter().map(|&h| FogStage::random(d_m, FOG_HIDDEN, h, rng)).collect() }
    }

    pub fn stage(&self, s: usize) -> Result<&FogStage<T>> {
        self.stages.get(s).ok_or(Error::IndexOutOfRange { what: "FOG stage", index: s, limit: self.stages.len() })
    }

    /// Kernels for every category at `stage`, outside any training graph.
    pub fn generate(&self, features: &Tensor<T>, stage: usize) -> Result<Tensor<T>> {
        let st = self.stage(stage)?;
        let mut g = Graph::new();
        let f = g.constant(features.clone())?;
        let vars = FogVars { w1: g.constant(st.w1.clone())?, b1: g.constant(st.b1.clone())?, w2: g.constant(st.w2.clone())?, b2: g.constant(st.b2.clone())? };
        let k = generate_kernels(&mut g, f, vars, st.channels)?;
        Ok(g.value(k).clone())
    }
}

/// Graph handles of one FOG stage.
#[derive(Clone, Copy, Debug)]
pub struct FogVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `[C, d_m]` modality features to `[C, channels, 3, 3, 3]` kernels.
pub fn generate_kernels<T: Scalar>(g: &mut Graph<T>, features: Var, fog: FogVars, channels: usize) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    if fs.len() != 2 {
        return Err(Error::shape("generate_kernels", format!("features {:?}", fs)));
    }
    let h = g.matmul(features, fog.w1)?;
    let h = g.add_bias(h, fog.b1, 1)?;
    let h = g.leaky_relu(h)?;
    let o = g.matmul(h, fog.w2)?;
    let o = g.add_bias(o, fog.b2, 1)?;
    if g.shape(o)[1] != channels * 27 {
        return Err(Error::shape("generate_kernels", format!("FOG emits {} values, need {}", g.shape(o)[1], channels * 27)));
    }
    g.reshape(o, &[fs[0], channels, 3, 3, 3])
}
