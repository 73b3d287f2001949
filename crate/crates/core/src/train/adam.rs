use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::Param;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[Param<T>], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero. Any
/// non-finite gradient rejects the whole step before anything changes.
pub fn adam_step<T: Element>(
    params: &mut [Param<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Optimizer(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(TrainError::Optimizer(format!(
                    "{}: gradient shape {:?} differs from {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient { param: p.name.clone(), index: i });
            }
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
    let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(eps));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].as_ref().map(Tensor::data);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
