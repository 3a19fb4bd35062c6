use serde::{Deserialize, Serialize};

use super::{ParamVector, Tensor};
use crate::error::{ensure, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// First/second moment accumulators with the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: ParamVector<T>,
    pub v: ParamVector<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamVector<T>) -> Self {
        Self { m: ParamVector::zeros_like(params), v: ParamVector::zeros_like(params), step: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut ParamVector<T>,
    grads: &ParamVector<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    ensure!(params.same_shapes(grads), "gradient shapes {:?} != parameter shapes {:?}", grads.shapes(), params.shapes());
    ensure!(
        params.same_shapes(&state.m) && params.same_shapes(&state.v),
        "optimizer state shapes do not match parameters"
    );
    ensure!(
        (0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2),
        "Adam betas must lie in [0, 1)"
    );

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);

    for i in 0..params.len() {
        let g: &Tensor<T> = grads.tensor(i);
        let m = state.m.tensor_mut(i);
        for (mk, &gk) in m.data_mut().iter_mut().zip(g.data()) {
            *mk = b1 * *mk + (T::one() - b1) * gk;
        }
        let v = state.v.tensor_mut(i);
        for (vk, &gk) in v.data_mut().iter_mut().zip(g.data()) {
            *vk = b2 * *vk + (T::one() - b2) * gk * gk;
        }
        let (m, v) = (state.m.tensor(i).data(), state.v.tensor(i).data());
        let p = params.tensor_mut(i);
        for ((pk, &mk), &vk) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mk / bc1;
            let v_hat = vk / bc2;
            *pk -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
