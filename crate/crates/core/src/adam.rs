//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {} params and {} grads",
                self.shapes.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), shape) in params.iter().zip(grads).zip(&self.shapes) {
            for t in [p, g] {
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        expected: shape.clone(),
                        actual: t.shape().to_vec(),
                    });
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("adam step"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![Tensor::vector(vec![0.5, -1.0])];
        let mut s = AdamState::new(&p, AdamConfig::default()).unwrap();
        s.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p[0].data(), &[0.5, -1.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::scalar(1.0)];
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut s = AdamState::new(&p, cfg).unwrap();
        s.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn repeated_gradient_does_not_grow_the_step() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p, AdamConfig::default()).unwrap();
        let g = [Tensor::scalar(0.3)];
        s.step(&mut p, &g).unwrap();
        let first = p[0].data()[0].abs();
        let before = p[0].data()[0];
        s.step(&mut p, &g).unwrap();
        let second = (p[0].data()[0] - before).abs();
        assert!(second <= first + 1e-12, "{second} > {first}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut s = AdamState::new(&p, AdamConfig::default()).unwrap();
        assert!(s.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert_eq!(s.step_count(), 0);
        let bad = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(AdamState::new(&p, bad).is_err());
    }
}
