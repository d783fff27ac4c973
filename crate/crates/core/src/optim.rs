//! LARS and momentum SGD over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};
use crate::nn::Tensor;

/// `η = 0.01 · N / 128`, held constant over training.
pub fn scaled_lr(batch_size: usize) -> f64 {
    0.01 * batch_size as f64 / 128.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrustMode {
    /// Per-tensor ratio `‖w‖ / (‖g‖ + wd·‖w‖ + ε)`.
    Adaptive,
    /// λ = 1 for every tensor.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_eps: f64,
    pub trust: TrustMode,
    /// Substrings of parameter names that bypass the trust ratio.
    pub exempt: Vec<String>,
}

impl OptimConfig {
    pub fn lars(lr: f64) -> Self {
        OptimConfig {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
            trust_eps: 1e-9,
            trust: TrustMode::Adaptive,
            exempt: vec![".bias".into(), ".bn".into()],
        }
    }

    pub fn is_exempt(&self, name: &str) -> bool {
        self.exempt.iter().any(|p| name.contains(p.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub momentum: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Self {
        OptimState {
            config,
            momentum: BTreeMap::new(),
            step: 0,
        }
    }
}

fn validated<'a>(
    params: &ModelParams<f32>,
    grads: &'a Gradients<f32>,
) -> Result<Vec<(&'a String, &'a Tensor<f32>)>> {
    let mut out = Vec::with_capacity(grads.len());
    for (name, g) in grads {
        let w = params.get(name)?;
        if w.shape() != g.shape() {
            return Err(Error::Optimizer(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                w.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Optimizer(format!("non-finite gradient in `{name}`")));
        }
        out.push((name, g));
    }
    Ok(out)
}

/// Trust ratio for one tensor. Falls back to 1 when either norm vanishes.
pub fn trust_ratio(w_norm: f64, g_norm: f64, weight_decay: f64, eps: f64) -> f64 {
    if w_norm == 0.0 || g_norm == 0.0 {
        1.0
    } else {
        w_norm / (g_norm + weight_decay * w_norm + eps)
    }
}

/// `v ← μ·v + λ·η·(g + wd·w)`, `w ← w − v`.
pub fn lars_step(params: &mut ModelParams<f32>, grads: &Gradients<f32>, state: &mut OptimState) -> Result<()> {
    let cfg = state.config.clone();
    for (name, g) in validated(params, grads)? {
        let w = params.get_mut(name)?;
        let lambda = if cfg.trust == TrustMode::Unit || cfg.is_exempt(name) {
            1.0
        } else {
            trust_ratio(w.norm(), g.norm(), cfg.weight_decay, cfg.trust_eps)
        };
        let scale = lambda * cfg.lr;
        let v = state
            .momentum
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(w.shape()));
        for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let upd = cfg.momentum * *vi as f64 + scale * (gi as f64 + cfg.weight_decay * *wi as f64);
            *vi = upd as f32;
            *wi = (*wi as f64 - upd) as f32;
        }
    }
    state.step += 1;
    Ok(())
}

/// `v ← μ·v + g + wd·w`, `w ← w − η·v`.
pub fn sgd_step(params: &mut ModelParams<f32>, grads: &Gradients<f32>, state: &mut OptimState) -> Result<()> {
    let cfg = state.config.clone();
    for (name, g) in validated(params, grads)? {
        let w = params.get_mut(name)?;
        let v = state
            .momentum
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(w.shape()));
        for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let upd = cfg.momentum * *vi as f64 + gi as f64 + cfg.weight_decay * *wi as f64;
            *vi = upd as f32;
            *wi = (*wi as f64 - cfg.lr * upd) as f32;
        }
    }
    state.step += 1;
    Ok(())
}
