//! The dual-branch encoder-decoder.
//!
//! Each encoder stage runs a learned 3x3x3 convolution (the traditional
//! branch) and, on its output, a convolution whose kernels the FOG generates
//! from the projected category features of the input modality (the
//! controller branch, one output channel per category). The two are
//! concatenated and fused back to the stage width by a 1x1x1 convolution.
//! The controller output doubles as the per-stage saliency map. Decoder
//! stages are traditional-only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::params::{Bound, ParamSet};
use crate::projection::{self, generate_kernels, normal_tensor, FogVars, LatentTable, FOG_HIDDEN};
use crate::tensor::{resize3, Graph, Scalar, Tensor, Var};
use crate::volume::{grid_corners, LabelVolume, Volume, DEFAULT_SPACING_MM};

/// Multi-modality training strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// One model, every input routed to the SHARED projection.
    Mixed,
    /// One model per modality.
    Specific,
    /// One model, modality tags routed to their own projections.
    Projection,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Strategy::Mixed),
            "specific" => Ok(Strategy::Specific),
            "projection" => Ok(Strategy::Projection),
            _ => Err(Error::Config(format!("unknown strategy {s}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Mixed => "mixed",
            Strategy::Specific => "specific",
            Strategy::Projection => "projection",
        })
    }
}

fn default_stages() -> Vec<usize> {
    vec![16, 32, 64, 128]
}
fn default_d_t() -> usize {
    64
}
fn default_d_m() -> usize {
    32
}
fn default_patch() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_categories: usize,
    #[serde(default = "default_stages")]
    pub stages: Vec<usize>,
    #[serde(default = "default_d_t")]
    pub d_t: usize,
    #[serde(default = "default_d_m")]
    pub d_m: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    pub modalities: Vec<Modality>,
    pub strategy: Strategy,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_categories: 3,
            stages: default_stages(),
            d_t: default_d_t(),
            d_m: default_d_m(),
            patch_size: default_patch(),
            modalities: Modality::IMAGING.to_vec(),
            strategy: Strategy::Projection,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_categories == 0 {
            return bad("num_categories must be at least 1".into());
        }
        if self.stages.len() < 2 {
            return bad(format!("need at least 2 stages, got {}", self.stages.len()));
        }
        if self.stages.contains(&0) || self.d_t == 0 || self.d_m == 0 {
            return bad("stage widths and latent dimensions must be positive".into());
        }
        let factor = 1 << (self.stages.len() - 1);
        if self.patch_size == 0 || self.patch_size % factor != 0 {
            return bad(format!("patch size {} is not divisible by {}", self.patch_size, factor));
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        if self.modalities.contains(&Modality::Shared) {
            return bad("SHARED is not an input modality".into());
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return bad("duplicate modality".into());
        }
        if self.strategy == Strategy::Specific && self.modalities.len() != 1 {
            return bad("a specific-strategy model covers exactly one modality".into());
        }
        Ok(())
    }

    /// Projection keys held by a model of this configuration.
    pub fn projection_keys(&self) -> Vec<Modality> {
        match self.strategy {
            Strategy::Mixed => vec![Modality::Shared],
            _ => self.modalities.clone(),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Spatial extent of stage `s` for a full-size patch.
    pub fn stage_extent(&self, s: usize) -> usize {
        self.patch_size >> s
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let c = self.num_categories;
        let h = &self.stages;
        let mut n = c * self.d_t + self.projection_keys().len() * self.d_t * self.d_m;
        for &hs in h {
            n += self.d_m * FOG_HIDDEN + FOG_HIDDEN + FOG_HIDDEN * hs * 27 + hs * 27;
        }
        n += h[0] * 27 + h[0];
        for s in 0..h.len() {
            let hin = if s == 0 { h[0] } else { h[s - 1] };
            n += h[s] * hin * 27 + h[s] + h[s] * (h[s] + c) + h[s];
        }
        for s in 0..h.len() - 1 {
            n += h[s] * (h[s + 1] + h[s]) * 27 + h[s];
        }
        n + (c + 1) * h[0] + c + 1
    }
}

/// Per-stage controller outputs for one sample, each `[C, d, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyRecord<T> {
    pub stages: Vec<Tensor<T>>,
}

/// Graph handles produced by [`Model::forward_graph`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// Controller-branch output of each encoder stage, `[B, C, d, h, w]`.
    pub saliency: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: NetworkConfig,
    pub categories: Vec<String>,
    pub params: ParamSet<T>,
}

fn he<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub(crate) fn projection_name(m: Modality) -> String {
    format!("proj.{m}")
}

/// Deterministic initialisation; categories are named `category_<i>`.
pub fn build_network<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<Model<T>> {
    let names = (1..=cfg.num_categories).map(|c| format!("category_{c}")).collect();
    build_network_named(cfg, names, seed)
}

pub fn build_network_named<T: Scalar>(cfg: &NetworkConfig, names: Vec<String>, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    if names.len() != cfg.num_categories {
        return Err(Error::Config(format!("{} names for {} categories", names.len(), cfg.num_categories)));
    }
    projection::check_unique(&names)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h) = (cfg.num_categories, &cfg.stages);
    let mut p = ParamSet::new();
    p.insert("latents", LatentTable::<T>::random(names.clone(), cfg.d_t, &mut rng)?.into_parts().1);
    for m in cfg.projection_keys() {
        p.insert(projection_name(m), normal_tensor(&[cfg.d_t, cfg.d_m], 1.0 / (cfg.d_t as f64).sqrt(), &mut rng));
    }
    for (s, &hs) in h.iter().enumerate() {
        let st = projection::FogStage::<T>::random(cfg.d_m, FOG_HIDDEN, hs, &mut rng);
        p.insert(format!("fog.{s}.w1"), st.w1);
        p.insert(format!("fog.{s}.b1"), st.b1);
        p.insert(format!("fog.{s}.w2"), st.w2);
        p.insert(format!("fog.{s}.b2"), st.b2);
    }
    p.insert("head.w", he(&[h[0], 1, 3, 3, 3], 27, &mut rng));
    p.insert("head.b", Tensor::zeros(&[h[0]]));
    for s in 0..h.len() {
        let hin = if s == 0 { h[0] } else { h[s - 1] };
        p.insert(format!("enc.{s}.w"), he(&[h[s], hin, 3, 3, 3], hin * 27, &mut rng));
        p.insert(format!("enc.{s}.b"), Tensor::zeros(&[h[s]]));
        p.insert(format!("enc.{s}.fuse.w"), he(&[h[s], h[s] + c], h[s] + c, &mut rng));
        p.insert(format!("enc.{s}.fuse.b"), Tensor::zeros(&[h[s]]));
    }
    for s in (0..h.len() - 1).rev() {
        let hin = h[s + 1] + h[s];
        p.insert(format!("dec.{s}.w"), he(&[h[s], hin, 3, 3, 3], hin * 27, &mut rng));
        p.insert(format!("dec.{s}.b"), Tensor::zeros(&[h[s]]));
    }
    p.insert("tail.w", normal_tensor(&[c + 1, h[0]], (1.0 / h[0] as f64).sqrt(), &mut rng));
    p.insert("tail.b", Tensor::zeros(&[c + 1]));
    Ok(Model { config: cfg.clone(), categories: names, params: p })
}

impl<T: Scalar> Model<T> {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn latent_table(&self) -> Result<LatentTable<T>> {
        LatentTable::new(self.categories.clone(), self.params.require("latents")?.clone())
    }

    /// Replaces the latent rows, e.g. with an externally anchored table.
    pub fn set_latents(&mut self, table: &LatentTable<T>) -> Result<()> {
        if table.names() != self.categories.as_slice() || table.d_t() != self.config.d_t {
            return Err(Error::Config("latent table does not match the model's categories".into()));
        }
        self.params.insert("latents", table.latents().clone());
        Ok(())
    }

    /// Projection key used for an input tagged `m`.
    pub fn route(&self, m: Modality) -> Result<Modality> {
        match self.config.strategy {
            Strategy::Mixed => Ok(Modality::Shared),
            Strategy::Specific => {
                let own = self.config.modalities[0];
                if m == own {
                    Ok(m)
                } else {
                    Err(Error::ModalityMismatch { expected: own.to_string(), got: m.to_string() })
                }
            }
            Strategy::Projection => {
                if self.config.modalities.contains(&m) {
                    Ok(m)
                } else {
                    Err(Error::UnknownModality(m.to_string()))
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), categories: self.categories.clone(), params: self.params.cast() }
    }

    /// Builds the forward pass for `x` (`[B, 1, P, P, P]`) on a graph where
    /// the parameters are already bound.
    pub fn forward_graph(&self, g: &mut Graph<T>, b: &Bound, x: Var, modality: Modality) -> Result<ForwardVars> {
        let p = self.config.patch_size;
        let sx = g.shape(x).to_vec();
        if sx.len() != 5 || sx[1] != 1 || sx[2..] != [p, p, p] {
            return Err(Error::shape("forward", format!("expected [B, 1, {p}, {p}, {p}], got {:?}", sx)));
        }
        let key = self.route(modality)?;
        let feats = g.matmul(b.var("latents")?, b.var(&projection_name(key))?)?;

        let conv = |g: &mut Graph<T>, x: Var, w: &str, bias: &str, stride: usize| -> Result<Var> {
            let y = g.conv3d(x, b.var(w)?, stride, 1)?;
            let y = g.add_bias(y, b.var(bias)?, 1)?;
            g.relu(y)
        };

        let mut h = conv(g, x, "head.w", "head.b", 1)?;
        let mut skips = Vec::new();
        let mut saliency = Vec::new();
        for (s, &hs) in self.config.stages.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let t = conv(g, h, &format!("enc.{s}.w"), &format!("enc.{s}.b"), stride)?;
            let fog = FogVars {
                w1: b.var(&format!("fog.{s}.w1"))?,
                b1: b.var(&format!("fog.{s}.b1"))?,
                w2: b.var(&format!("fog.{s}.w2"))?,
                b2: b.var(&format!("fog.{s}.b2"))?,
            };
            let k = generate_kernels(g, feats, fog, hs)?;
            let sal = g.conv3d(t, k, 1, 1)?;
            saliency.push(sal);
            let cat = g.concat_channels(t, sal)?;
            let f = g.conv1x1(cat, b.var(&format!("enc.{s}.fuse.w"))?)?;
            let f = g.add_bias(f, b.var(&format!("enc.{s}.fuse.b"))?, 1)?;
            h = g.relu(f)?;
            skips.push(h);
        }
        for s in (0..self.config.stages.len() - 1).rev() {
            let up = g.upsample2x(h)?;
            let cat = g.concat_channels(up, skips[s])?;
            h = conv(g, cat, &format!("dec.{s}.w"), &format!("dec.{s}.b"), 1)?;
        }
        let y = g.conv1x1(h, b.var("tail.w")?)?;
        let logits = g.add_bias(y, b.var("tail.b")?, 1)?;
        Ok(ForwardVars { logits, saliency })
    }

    /// Inference forward pass. Saliency, when requested, is recorded for the
    /// first sample of the batch.
    pub fn forward(&self, patch: &Tensor<T>, modality: Modality, capture_saliency: bool) -> Result<(Tensor<T>, Option<SaliencyRecord<T>>)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false)?;
        let x = g.constant(patch.clone())?;
        let out = self.forward_graph(&mut g, &b, x, modality)?;
        let record = capture_saliency.then(|| SaliencyRecord {
            stages: out
                .saliency
                .iter()
                .map(|&v| {
                    let t = g.value(v);
                    let s = t.shape();
                    let per = s[1..].iter().product::<usize>();
                    Tensor::new(s[1..].to_vec(), t.data()[..per].to_vec()).expect("slice matches shape")
                })
                .collect(),
        });
        Ok((g.value(out.logits).clone(), record))
    }

    /// Kernels the controller uses at `stage` for inputs tagged `modality`,
    /// `[C, H_s, 3, 3, 3]`.
    pub fn kernels(&self, modality: Modality, stage: usize) -> Result<Tensor<T>> {
        if stage >= self.config.stages.len() {
            return Err(Error::IndexOutOfRange { what: "stage", index: stage, limit: self.config.stages.len() });
        }
        let key = self.route(modality)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false)?;
        let feats = g.matmul(b.var("latents")?, b.var(&projection_name(key))?)?;
        let fog = FogVars {
            w1: b.var(&format!("fog.{stage}.w1"))?,
            b1: b.var(&format!("fog.{stage}.b1"))?,
            w2: b.var(&format!("fog.{stage}.w2"))?,
            b2: b.var(&format!("fog.{stage}.b2"))?,
        };
        let k = generate_kernels(&mut g, feats, fog, self.config.stages[stage])?;
        Ok(g.value(k).clone())
    }

    /// Appends categories: new latent rows, zero fusion weights for the new
    /// controller channels (so existing outputs are unchanged) and random
    /// tail rows for the new logits.
    pub fn add_categories(&mut self, names: &[String], latents: Option<&Tensor<T>>, seed: u64) -> Result<()> {
        if names.is_empty() {
            return Ok(());
        }
        let mut all = self.categories.clone();
        all.extend(names.iter().cloned());
        projection::check_unique(&all)?;
        let (c_old, k) = (self.categories.len(), names.len());
        let d_t = self.config.d_t;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = match latents {
            Some(t) => {
                if t.shape() != [k, d_t] {
                    return Err(Error::shape("add_categories", format!("latents {:?}, expected [{k}, {d_t}]", t.shape())));
                }
                t.clone()
            }
            None => normal_tensor(&[k, d_t], projection::LATENT_INIT_STD, &mut rng),
        };
        let lat = self.params.require("latents")?;
        let mut data = lat.data().to_vec();
        data.extend_from_slice(rows.data());
        self.params.insert("latents", Tensor::new(vec![c_old + k, d_t], data)?);

        for (s, &hs) in self.config.stages.clone().iter().enumerate() {
            let name = format!("enc.{s}.fuse.w");
            let w = self.params.require(&name)?;
            let (cin_old, cin_new) = (hs + c_old, hs + c_old + k);
            let mut nw = vec![T::zero(); hs * cin_new];
            for o in 0..hs {
                nw[o * cin_new..o * cin_new + cin_old].copy_from_slice(&w.data()[o * cin_old..(o + 1) * cin_old]);
            }
            self.params.insert(name, Tensor::new(vec![hs, cin_new], nw)?);
        }
        let h0 = self.config.stages[0];
        let tw = self.params.require("tail.w")?;
        let mut nw = tw.data().to_vec();
        nw.extend(normal_tensor::<T>(&[k, h0], (1.0 / h0 as f64).sqrt(), &mut rng).into_data());
        self.params.insert("tail.w", Tensor::new(vec![c_old + 1 + k, h0], nw)?);
        let tb = self.params.require("tail.b")?;
        let mut nb = tb.data().to_vec();
        nb.extend(std::iter::repeat(T::zero()).take(k));
        self.params.insert("tail.b", Tensor::new(vec![c_old + 1 + k], nb)?);

        self.categories = all;
        self.config.num_categories = c_old + k;
        Ok(())
    }
}

/// Labels as a one-hot `[B, C + 1, ...]` tensor.
pub fn one_hot<T: Scalar>(labels: &[u16], batch: usize, classes: usize) -> Result<Tensor<T>> {
    if batch == 0 || labels.len() % batch != 0 {
        return Err(Error::shape("one_hot", format!("{} labels for batch {batch}", labels.len())));
    }
    let s = labels.len() / batch;
    let mut data = vec![T::zero(); batch * classes * s];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::IndexOutOfRange { what: "label", index: l, limit: classes });
        }
        let (b, v) = (i / s, i % s);
        data[(b * classes + l) * s + v] = T::one();
    }
    Tensor::new(vec![batch, classes, s], data)
}

fn flat_logits<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<(Var, usize, usize)> {
    let s = g.shape(logits).to_vec();
    if s.len() < 3 {
        return Err(Error::shape("loss", format!("logits {:?}", s)));
    }
    let (b, c) = (s[0], s[1]);
    let flat = g.reshape(logits, &[b, c, s[2..].iter().product()])?;
    Ok((flat, b, c))
}

/// Mean voxelwise cross-entropy.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u16]) -> Result<Var> {
    let (flat, b, c) = flat_logits(g, logits)?;
    let y = g.constant(one_hot(labels, b, c)?)?;
    let logp = g.log_softmax_channels(flat)?;
    let picked = g.mul(logp, y)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / labels.len() as f64)
}

pub const DICE_SMOOTH: f64 = 1.0;

/// `1 - mean_c (2 |p_c y_c| + s) / (|p_c| + |y_c| + s)` over foreground
/// channels `c >= 1`, sums taken over the whole batch.
pub fn soft_dice_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u16]) -> Result<Var> {
    let (flat, b, c) = flat_logits(g, logits)?;
    if c < 2 {
        return Err(Error::shape("soft_dice_loss", "need at least one foreground channel"));
    }
    let y = g.constant(one_hot(labels, b, c)?)?;
    let mut ysum = vec![0.0; c];
    for &l in labels {
        ysum[l as usize] += 1.0;
    }
    let logp = g.log_softmax_channels(flat)?;
    let p = g.map(logp, crate::tensor::Pointwise::Exp)?;
    let py = g.mul(p, y)?;
    let inter = g.channel_sum(py)?;
    let psum = g.channel_sum(p)?;
    let yconst = g.constant(Tensor::new(vec![c], ysum.iter().map(|&v| T::of(v + DICE_SMOOTH)).collect())?)?;
    let denom = g.add(psum, yconst)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.map(num, crate::tensor::Pointwise::AddScalar(DICE_SMOOTH))?;
    let ratio = g.div(num, denom)?;
    let mask = g.constant(Tensor::from_fn(&[c], |i| if i == 0 { T::zero() } else { T::one() }))?;
    let fg = g.mul(ratio, mask)?;
    let total = g.sum(fg)?;
    let mean = g.scale(total, -1.0 / (c - 1) as f64)?;
    g.map(mean, crate::tensor::Pointwise::AddScalar(1.0))
}

/// Soft Dice plus cross-entropy, unweighted.
pub fn compute_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u16]) -> Result<Var> {
    let dice = soft_dice_loss(g, logits, labels)?;
    let ce = cross_entropy(g, logits, labels)?;
    g.add(dice, ce)
}

/// Anything that labels a whole volume.
pub trait Predictor {
    fn predict(&self, vol: &Volume, modality: Modality) -> Result<LabelVolume>;
}

impl Predictor for Model<f32> {
    fn predict(&self, vol: &Volume, modality: Modality) -> Result<LabelVolume> {
        predict_volume(self, vol, modality)
    }
}

/// Sliding-window logits averaged over overlapping tiles (stride half a
/// patch), in `[C + 1, nz, ny, nx]` order.
pub fn predict_logits<T: Scalar>(model: &Model<T>, vol: &Volume, modality: Modality) -> Result<Tensor<T>> {
    if vol.data.is_empty() {
        return Err(Error::Data("empty volume".into()));
    }
    let p = model.config.patch_size;
    let classes = model.num_categories() + 1;
    let stride = (p / 2).max(1);
    let [nx, ny, nz] = vol.dims;
    let axes: Vec<Vec<usize>> = (0..3).map(|a| grid_corners(vol.dims[a], p, stride)).collect();
    let n = nx * ny * nz;
    let mut acc = vec![0.0f64; classes * n];
    let mut count = vec![0u32; n];
    for &cz in &axes[2] {
        for &cy in &axes[1] {
            for &cx in &axes[0] {
                let mut tile = vec![T::zero(); p * p * p];
                for z in 0..p.min(nz - cz) {
                    for y in 0..p.min(ny - cy) {
                        for x in 0..p.min(nx - cx) {
                            tile[(z * p + y) * p + x] = T::of(vol.at(cx + x, cy + y, cz + z) as f64);
                        }
                    }
                }
                let (logits, _) = model.forward(&Tensor::new(vec![1, 1, p, p, p], tile)?, modality, false)?;
                let ld = logits.data();
                for z in 0..p.min(nz - cz) {
                    for y in 0..p.min(ny - cy) {
                        for x in 0..p.min(nx - cx) {
                            let i = (cx + x) + nx * ((cy + y) + ny * (cz + z));
                            count[i] += 1;
                            let t = (z * p + y) * p + x;
                            for k in 0..classes {
                                acc[k * n + i] += ld[k * p * p * p + t].f64();
                            }
                        }
                    }
                }
            }
        }
    }
    let data = acc.iter().enumerate().map(|(j, &v)| T::of(v / count[j % n] as f64)).collect();
    Tensor::new(vec![classes, nz, ny, nx], data)
}

/// Per-voxel argmax of `[C + 1, ...]` scores; ties go to the lower index.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Vec<u16> {
    let classes = scores.shape()[0];
    let n = scores.numel() / classes;
    let d = scores.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..classes {
                if d[k * n + i] > d[best * n + i] {
                    best = k;
                }
            }
            best as u16
        })
        .collect()
}

/// Whole-volume segmentation.
pub fn predict_volume<T: Scalar>(model: &Model<T>, vol: &Volume, modality: Modality) -> Result<LabelVolume> {
    let logits = predict_logits(model, vol, modality)?;
    LabelVolume::new(argmax_labels(&logits), vol.dims, vol.spacing_mm, LabelVolume::table_with_background(&model.categories))
}

/// Min-max normalisation to `[0, 1]`; constant maps become zeros.
pub fn min_max_normalize(data: &mut [f32]) {
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        data.iter_mut().for_each(|v| *v = 0.0);
    } else {
        data.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
}

/// The controller map of one (stage, category), trilinearly resized to the
/// patch grid and scaled to `[0, 1]`.
pub fn extract_saliency<T: Scalar>(model: &Model<T>, patch: &Tensor<T>, modality: Modality, stage: usize, category: usize) -> Result<Volume> {
    let stages = model.config.stages.len();
    if stage >= stages {
        return Err(Error::IndexOutOfRange { what: "stage", index: stage, limit: stages });
    }
    if category >= model.num_categories() {
        return Err(Error::IndexOutOfRange { what: "category", index: category, limit: model.num_categories() });
    }
    let (_, rec) = model.forward(patch, modality, true)?;
    let map = &rec.expect("requested").stages[stage];
    let s = map.shape();
    let dims = [s[1], s[2], s[3]];
    let per = dims.iter().product::<usize>();
    let chan = &map.data()[category * per..(category + 1) * per];
    let p = model.config.patch_size;
    let full = resize3(chan, 1, dims, [p, p, p]);
    let mut data: Vec<f32> = full.iter().map(|v| v.f64() as f32).collect();
    min_max_normalize(&mut data);
    Volume::new(data, [p, p, p], [DEFAULT_SPACING_MM; 3], modality)
}
