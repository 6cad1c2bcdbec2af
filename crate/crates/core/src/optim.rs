//! AdamW with decoupled weight decay.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        let positive = |x: f64| x.is_finite() && x > 0.0;
        let non_negative = |x: f64| x.is_finite() && x >= 0.0;
        if !positive(self.lr)
            || !beta_ok(self.beta1)
            || !beta_ok(self.beta2)
            || !positive(self.eps)
            || !non_negative(self.weight_decay)
        {
            return Err(Error::InvalidConfig(format!("bad optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// One AdamW update of a flat parameter slice at step `t ≥ 1`.
pub fn adamw_update(theta: &mut [f32], grad: &[f64], m: &mut [f32], v: &mut [f32], cfg: &AdamWConfig, t: u64) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        let th = theta[i] as f64;
        theta[i] = (th - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * th)) as f32;
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: IndexMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ModelParams<f32>) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| {
                let z = Tensor::zeros(t.dims().to_vec());
                (name.to_string(), (z.clone(), z))
            })
            .collect();
        AdamW {
            config,
            step: 0,
            moments,
        }
    }

    /// Applies one update. Parameters missing from `grads` get a zero
    /// gradient. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &IndexMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            let expected = params
                .get(name)
                .ok_or_else(|| Error::StepRejected(format!("gradient for unknown parameter {name}")))?
                .numel();
            if g.len() != expected {
                return Err(Error::StepRejected(format!(
                    "{name}: gradient has {} entries, parameter has {expected}",
                    g.len()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::StepRejected(format!("{name}[{i}] gradient is {}", g[i])));
            }
        }
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        for (name, theta) in params.iter_mut() {
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::StepRejected(format!("no optimizer state for {name}")))?;
            let zeros;
            let g = match grads.get(name) {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![0.0; theta.numel()];
                    &zeros
                }
            };
            adamw_update(theta.data_mut(), g, m.data_mut(), v.data_mut(), &cfg, t);
        }
        Ok(())
    }
}
