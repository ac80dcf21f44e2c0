//! Adam with global-norm gradient clipping.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm the gradient is scaled down to; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamSettings {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment estimates, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    /// Steps skipped because of a non-finite gradient.
    pub rejected: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// Update applied; carries the pre-clipping gradient norm.
    Applied { grad_norm: f64 },
    RejectedNonFinite,
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// One Adam update of every trainable parameter. A trainable parameter
/// without an entry in `grads` is updated with a zero gradient.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &GradMap,
    settings: &AdamSettings,
    state: &mut AdamState,
) -> Result<StepOutcome> {
    settings.validate()?;
    for (name, g) in grads {
        let p = params.get(name)?;
        if !p.trainable {
            return Err(Error::Training(format!("gradient supplied for frozen parameter {name}")));
        }
        if g.len() != p.value.numel() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                lhs: p.value.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        state.rejected += 1;
        log::warn!("non-finite gradient, step skipped ({} so far)", state.rejected);
        return Ok(StepOutcome::RejectedNonFinite);
    }
    let scale = match settings.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - settings.beta1.powi(t);
    let bc2 = 1.0 - settings.beta2.powi(t);
    for (name, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
        let n = p.value.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let g = grads.get(name);
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i] * scale);
            m[i] = settings.beta1 * m[i] + (1.0 - settings.beta1) * gi;
            v[i] = settings.beta2 * v[i] + (1.0 - settings.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= settings.lr * m_hat / (v_hat.sqrt() + settings.eps);
        }
    }
    Ok(StepOutcome::Applied { grad_norm: norm })
}

/// Elementwise sum of per-example gradients, in the order given, scaled by `scale`.
pub fn sum_gradients(parts: &[GradMap], scale: f64) -> GradMap {
    let mut total = GradMap::new();
    for part in parts {
        for (name, g) in part {
            let acc = total.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    for g in total.values_mut() {
        for v in g {
            *v *= scale;
        }
    }
    total
}
