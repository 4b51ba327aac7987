use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        OptimState {
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step. Returns the updated tensors in input order,
/// untracked.
pub fn adam_step(
    params: &[(String, Tensor)],
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<Vec<Tensor>> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Validation(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Validation(format!(
                "gradient for {name} is {:?}, parameter is {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::numeric("adam_step", format!("non-finite gradient for {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut out = Vec::with_capacity(params.len());
    for (i, ((_, p), g)) in params.iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data: Vec<f64> = p
            .data()
            .iter()
            .zip(g.data())
            .enumerate()
            .map(|(j, (x, gj))| {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                x - lr * m_hat / (v_hat.sqrt() + cfg.eps)
            })
            .collect();
        out.push(Tensor::new(p.rows(), p.cols(), data)?);
    }
    Ok(out)
}
