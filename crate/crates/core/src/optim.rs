//! Plain SGD and Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(param: &[f64], grad: &[f64]) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::shape(format!(
            "parameter has {} elements, gradient has {}",
            param.len(),
            grad.len()
        )));
    }
    Ok(())
}

/// `param -= lr * grad`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    check_lengths(param, grad)?;
    for (p, g) in param.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update at step `t` (1-based).
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, hp: AdamHyper, t: u64) -> Result<()> {
    check_lengths(param, grad)?;
    if t == 0 {
        return Err(Error::validation("adam step counter starts at 1"));
    }
    if state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::shape("adam state does not match parameter length"));
    }
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        *p -= hp.lr * (*m / c1) / ((*v / c2).sqrt() + hp.eps);
    }
    Ok(())
}
