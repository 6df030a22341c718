use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for every tensor of a [`ParamSet`], in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn matches(&self, params: &ParamSet<f32>) -> bool {
        self.m.len() == params.len() && params.iter().zip(self.m.iter().zip(&self.v)).all(|((_, p), (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }

    /// One update; tensors whose gradient is `None` are left untouched.
    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &[Option<Tensor<f32>>]) -> Result<()> {
        if !self.matches(params) || grads.len() != params.len() {
            return Err(Error::shape("adam", "moment buffers do not match the parameters"));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (c.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                *w -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
