use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: ModelParams<Mat>,
    pub second: ModelParams<Mat>,
}

impl AdamState {
    pub fn new(params: &ModelParams<Mat>, config: AdamConfig) -> Self {
        let zeros = params.map(|m| Mat::zeros(m.rows(), m.cols()));
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One Adam update of a flat block; `t` is the 1-based step count.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

pub fn optimizer_step(params: &mut ModelParams<Mat>, grads: &ModelParams<Mat>, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step;
    let cfg = state.config;
    let grads = grads.leaves();
    let firsts = state.first.leaves_mut();
    let seconds = state.second.leaves_mut();
    for (((p, g), m), v) in params.leaves_mut().into_iter().zip(grads).zip(firsts).zip(seconds) {
        adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), t, lr, &cfg);
    }
}
