use super::{OptimConfig, TrainError};
use crate::model::ModelParams;

/// Optimizer moments and update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ModelParams, clip_norm: f64) -> Result<f64, TrainError> {
    let norm = grads.sum_sq().sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    Ok(norm)
}

/// One AdamW update with bias correction; weight decay is decoupled and only
/// applied to embedding and linear weights.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<(), TrainError> {
    let g = grads.tensors();
    let mut m = state.m.tensors_mut();
    let mut v = state.v.tensors_mut();
    let mut p = params.tensors_mut();
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(TrainError::ShapeMismatch("tensor count".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..p.len() {
        let (name, kind, theta) = &mut p[i];
        let grad = g[i].2;
        let (mi, vi) = (&mut m[i].2, &mut v[i].2);
        if grad.len() != theta.len() || mi.len() != theta.len() || vi.len() != theta.len() {
            return Err(TrainError::ShapeMismatch(name.clone()));
        }
        let decay = if kind.decays() { lr * cfg.weight_decay } else { 0.0 };
        for j in 0..theta.len() {
            mi[j] = cfg.beta1 * mi[j] + (1.0 - cfg.beta1) * grad[j];
            vi[j] = cfg.beta2 * vi[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
            let mhat = mi[j] / c1;
            let vhat = vi[j] / c2;
            theta[j] -= lr * mhat / (vhat.sqrt() + cfg.eps) + decay * theta[j];
        }
    }
    Ok(())
}
