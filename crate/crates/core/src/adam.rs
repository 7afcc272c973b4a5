//! Adam with decoupled weight decay.
//!
//! The decay is applied to the parameter before the bias-corrected moment
//! update (`p ← p − lr·wd·p`), so decay and gradient adaptation do not
//! interact.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
}

impl<F: Real> Default for AdamConfig<F> {
    fn default() -> Self {
        AdamConfig {
            lr: F::of(3e-4),
            beta1: F::of(0.9),
            beta2: F::of(0.99),
            eps: F::of(1e-8),
            weight_decay: F::of(3e-4),
        }
    }
}

/// First/second moment estimates plus the step counter, aligned with the
/// parameter list they were created for.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
        }
    }
}

/// One optimizer step over a parameter list. `grads` must align with
/// `params` in order and shape.
pub fn adam_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[&[F]],
    state: &mut AdamState<F>,
    cfg: &AdamConfig<F>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "adam_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].len() != p.numel() {
            return Err(Error::shape(format!(
                "adam_step: grad {} has {} elements, param has {}",
                i,
                grads[i].len(),
                p.numel()
            )));
        }
    }
    state.step += 1;
    let t = state.step;
    let one = F::one();
    let bc1 = one - cfg.beta1.powi(t as i32);
    let bc2 = one - cfg.beta2.powi(t as i32);
    let decay = one - cfg.lr * cfg.weight_decay;

    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let g = grads[i];
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let pd = *pj * decay;
            m[j] = cfg.beta1 * m[j] + (one - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (one - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *pj = pd - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
