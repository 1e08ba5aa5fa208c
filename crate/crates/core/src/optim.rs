//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed accumulators shaped like `params`.
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Rebuilds a state from stored accumulators.
    pub fn from_parts(
        lr: f64,
        betas: (f64, f64),
        eps: f64,
        step: u64,
        first_moment: Vec<Vec<f64>>,
        second_moment: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if first_moment.len() != second_moment.len()
            || first_moment.iter().zip(&second_moment).any(|(m, v)| m.len() != v.len())
        {
            return Err(Error::Format {
                what: "adam state",
                detail: "moment shapes disagree".into(),
            });
        }
        Ok(Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            step,
            first_moment,
            second_moment,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                &[params.len()],
                &[grads.len(), self.first_moment.len()],
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0]).unwrap()];
        let before = params.clone();
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(params, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias-corrected first step: mhat = g, vhat = g^2, so the step is lr * g / (|g| + eps).
        for g in [0.3, -5.0, 1e-3] {
            let mut params = vec![Tensor::scalar(2.0)];
            let mut adam = AdamState::new(&params, 1e-2);
            adam.step(&mut params, &[vec![g]]).unwrap();
            let moved = 2.0 - params[0].data()[0];
            let expected = 1e-2 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-12, "{moved} vs {expected}");
        }
    }

    #[test]
    fn quadratic_descends() {
        for lr in [1e-4, 1e-3, 1e-2] {
            let mut params = vec![Tensor::scalar(0.5)];
            let mut adam = AdamState::new(&params, lr);
            let mut last = 0.5f64;
            for _ in 0..2 {
                let x = params[0].data()[0];
                adam.step(&mut params, &[vec![2.0 * x]]).unwrap();
                let now = params[0].data()[0].abs();
                assert!(now < last);
                last = now;
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0]).unwrap()];
        let mut adam = AdamState::new(&params, 1e-3);
        assert!(adam.step(&mut params, &[vec![1.0]]).is_err());
        assert_eq!(adam.step_count(), 0);
    }
}
