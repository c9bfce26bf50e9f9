//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, lazily sized on the first step.
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step_count(&self) -> u32 {
        self.t
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One update over an ordered parameter list. `grads[i]` pairs with
/// `params[i]`; a missing gradient leaves that parameter untouched.
pub fn adam_step<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        state.v = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
    }
    state.t += 1;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - cfg.beta1.powi(state.t as i32));
    let corr2 = T::from_f64(1.0 - cfg.beta2.powi(state.t as i32));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);

    for (i, (name, p)) in params.iter_mut().enumerate() {
        let Some(grad) = &grads[i] else { continue };
        if grad.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient shape {:?} vs parameter {} {:?}", grad.shape(), name, p.shape()),
            ));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grad.data();
        for (j, pv) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
