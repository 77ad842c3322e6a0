use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Shrink parameters directly (`p ← p − lr·wd·p`) instead of adding
    /// `wd·p` to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4, decoupled: true }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_count: usize) -> Self {
        AdamState { m: vec![T::zero(); param_count], v: vec![T::zero(); param_count], t: 0 }
    }
}

/// One Adam update over parameter slices and matching gradient slices, in the
/// same order. Non-finite gradients abort before anything is modified.
///
/// With decoupled decay each parameter is first shrunk as
/// `p = p - lr * wd * p` and then moved by the bias-corrected Adam step.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    let total: usize = params.iter().map(|p| p.len()).sum();
    if params.len() != grads.len()
        || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        || total != state.m.len()
    {
        return Err(TrainError::InvalidArgument("parameter and gradient shapes differ".into()));
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(TrainError::NonFinite { epoch: 0, batch: 0, what: "gradient" });
    }
    let c = |v: f64| T::from(v).expect("finite constant");
    state.t += 1;
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let (one_b1, one_b2) = (c(1.0 - cfg.beta1), c(1.0 - cfg.beta2));
    let bc1 = c(1.0 - cfg.beta1.powi(state.t as i32));
    let bc2 = c(1.0 - cfg.beta2.powi(state.t as i32));
    let (lr_t, eps, decay) = (c(lr), c(cfg.eps), c(lr * cfg.weight_decay));
    let wd = c(cfg.weight_decay);
    let mut k = 0;
    for (ps, gs) in params.iter_mut().zip(grads) {
        for (p, &g0) in ps.iter_mut().zip(gs.iter()) {
            let mut g = g0;
            if cfg.weight_decay != 0.0 {
                if cfg.decoupled {
                    *p -= decay * *p;
                } else {
                    g += wd * *p;
                }
            }
            let m = b1 * state.m[k] + one_b1 * g;
            let v = b2 * state.v[k] + one_b2 * g * g;
            state.m[k] = m;
            state.v[k] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
            k += 1;
        }
    }
    Ok(())
}
