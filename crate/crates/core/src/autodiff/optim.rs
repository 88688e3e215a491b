//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected AdamW update at step `t` (1-based).
///
/// A non-finite gradient leaves weights and moments untouched and reports
/// `OPTIMIZER_DIVERGENCE`.
pub fn adamw_step(
    weights: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    hyper: &AdamWConfig,
    t: usize,
) -> Result<()> {
    if weights.len() != grads.len()
        || weights.len() != moments.m.len()
        || weights.len() != moments.v.len()
    {
        return Err(Error::shape(format!(
            "adamw: {} weights, {} grads, {}/{} moments",
            weights.len(),
            grads.len(),
            moments.m.len(),
            moments.v.len()
        )));
    }
    if t == 0 {
        return Err(Error::contract("adamw step index starts at 1"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::OptimizerDivergence {
            step: t,
            msg: format!("non-finite gradient at index {i}"),
        });
    }
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    let decay = 1.0 - hyper.lr * hyper.weight_decay;
    for i in 0..weights.len() {
        let g = grads[i];
        let m = hyper.beta1 * moments.m[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * moments.v[i] + (1.0 - hyper.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        weights[i] = weights[i] * decay - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Optimizer state over a list of weight tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: Vec<Moments>,
    step: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            moments: params.iter().map(|p| Moments::zeros(p.numel())).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Updates every tensor, or none of them if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.moments.len() {
            return Err(Error::shape("adamw: parameter list length changed"));
        }
        let t = self.step + 1;
        if let Some(k) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::OptimizerDivergence {
                step: t,
                msg: format!("non-finite gradient in weight tensor {k}"),
            });
        }
        for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            adamw_step(p.data_mut(), g.data(), m, &self.config, t)?;
        }
        self.step = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut w = vec![0.3, -1.2];
        let mut m = Moments::zeros(2);
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut w, &[0.0, 0.0], &mut m, &hyper, 1).unwrap();
        assert_eq!(w, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps).
        let mut w = vec![1.0];
        let mut m = Moments::zeros(1);
        let hyper = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut w, &[1.0], &mut m, &hyper, 1).unwrap();
        assert!((w[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let mut w = vec![2.0];
        let mut m = Moments::zeros(1);
        let hyper = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&mut w, &[0.0], &mut m, &hyper, 1).unwrap();
        assert!((w[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut w = vec![1.0, 2.0];
        let mut m = Moments::zeros(2);
        let err = adamw_step(&mut w, &[0.5, f64::NAN], &mut m, &AdamWConfig::default(), 3)
            .unwrap_err();
        assert_eq!(err.code(), "OPTIMIZER_DIVERGENCE");
        assert_eq!(w, vec![1.0, 2.0]);
        assert_eq!(m, Moments::zeros(2));
    }

    #[test]
    fn defaults_match_published_values() {
        let c = AdamWConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2, c.eps, c.weight_decay), (5e-4, 0.9, 0.999, 1e-8, 0.01));
    }
}
