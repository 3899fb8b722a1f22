//! Adam, the cosine learning-rate schedule and the adversarial weight ramp.

use crate::error::{Error, Result};
use crate::numgrad::DenseMatrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<DenseMatrix<T>>,
    pub v: Vec<DenseMatrix<T>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>, config: AdamConfig) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|(r, c)| (DenseMatrix::zeros(r, c), DenseMatrix::zeros(r, c)))
            .unzip();
        Self { m, v, step: 0, config }
    }

    pub fn for_params(params: &[&DenseMatrix<T>]) -> Self {
        Self::new(params.iter().map(|p| p.shape()), AdamConfig::default())
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut DenseMatrix<T>],
    grads: &[DenseMatrix<T>],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step got {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr > T::zero()) {
        return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[k].shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps));
    let one = T::one();
    let bc1 = one - b1.powi(state.step as i32);
    let bc2 = one - b2.powi(state.step as i32);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let w = p.data_mut();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `max_lr · ½ (1 + cos(π t / T))` for `0 ≤ t ≤ T`.
pub fn cosine_lr(t: usize, total: usize, max_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Contract("cosine schedule needs at least one step".into()));
    }
    if t > total {
        return Err(Error::Contract(format!("step {t} beyond schedule length {total}")));
    }
    if t == total {
        return Ok(0.0);
    }
    let frac = t as f64 / total as f64;
    Ok(max_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Adversarial weight ramp `2 / (1 + e^{-10 p}) - 1` for training progress `p ∈ [0, 1]`.
pub fn dann_ramp(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}
