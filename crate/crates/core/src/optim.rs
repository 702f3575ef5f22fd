//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr_peak: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Share of all steps spent in linear warmup.
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_lr() -> f64 {
    1.5e-4
}
fn default_wd() -> f64 {
    0.05
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_warmup() -> f64 {
    0.05
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_peak: default_lr(),
            weight_decay: default_wd(),
            betas: default_betas(),
            eps: default_eps(),
            warmup_fraction: default_warmup(),
            clip_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        let ok = self.lr_peak >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.warmup_fraction)
            && self.clip_norm.map_or(true, |c| c > 0.0);
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings: {self:?}")));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_fraction * total_steps as f64).round() as usize
    }
}

/// Learning rate at `step`: linear ramp from 0 to `lr_peak` over the
/// warmup, then half-cosine down to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &OptimConfig) -> f64 {
    let warmup = cfg.warmup_steps(total_steps);
    let step = step.min(total_steps);
    if step < warmup {
        return cfg.lr_peak * step as f64 / warmup as f64;
    }
    let span = total_steps - warmup;
    if span == 0 {
        return cfg.lr_peak;
    }
    let progress = (step - warmup) as f64 / span as f64;
    cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Biases, norm parameters, the class token and positional embeddings
/// are not decayed.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && !name.ends_with("pos_embed")
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    /// Completed update count.
    pub t: u64,
    pub state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Scale factor that brings the global gradient norm under `clip_norm`.
    pub fn clip_scale<'a>(&self, grads: impl IntoIterator<Item = &'a Tensor<T>>) -> f64 {
        let Some(limit) = self.cfg.clip_norm else { return 1.0 };
        let sq: f64 = grads
            .into_iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum();
        let norm = sq.sqrt();
        if norm > limit {
            limit / norm
        } else {
            1.0
        }
    }

    /// Apply one update to every `(name, param, grad)` triple with the
    /// given learning rate. Gradients are multiplied by `grad_scale` first.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'a mut Tensor<T>, &'a Tensor<T>)>,
        lr: f64,
        grad_scale: f64,
    ) -> Result<()>
    where
        T: 'a,
    {
        for (name, p, g) in params {
            self.update(&name, p, g, lr, grad_scale)?;
        }
        self.finish_step();
        Ok(())
    }

    /// Update a single parameter as part of the step in progress. Call
    /// [`AdamW::finish_step`] once every parameter has been visited.
    pub fn update(&mut self, name: &str, p: &mut Tensor<T>, g: &Tensor<T>, lr: f64, grad_scale: f64) -> Result<()> {
        if p.shape() != g.shape() {
            return Err(Error::dim("adamw", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numeric {
                stage: format!("gradient of {name}"),
            });
        }
        let t = (self.t + 1) as i32;
        let (b1, b2) = self.cfg.betas;
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / (1.0 - b1.powi(t))), T::from_f64(1.0 / (1.0 - b2.powi(t))));
        let (lr_t, eps, gs) = (T::from_f64(lr), T::from_f64(self.cfg.eps), T::from_f64(grad_scale));
        let decay = if decays(name, p.shape()) {
            T::from_f64(1.0 - lr * self.cfg.weight_decay)
        } else {
            T::one()
        };
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(p.shape()),
            v: Tensor::zeros(p.shape()),
        });
        let (md, vd) = (st.m.data_mut(), st.v.data_mut());
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(md).zip(vd) {
            let gi = gi * gs;
            *mi = b1t * *mi + one_b1 * gi;
            *vi = b2t * *vi + one_b2 * gi * gi;
            let mhat = *mi * inv_bc1;
            let vhat = *vi * inv_bc2;
            *pi = *pi * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }

    pub fn finish_step(&mut self) {
        self.t += 1;
    }
}
