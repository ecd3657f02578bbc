use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam optimizer state for one parameter list.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &[Tensor<S>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let one = S::one();
        let bc1 = one - b1.powi(self.step as i32);
        let bc2 = one - b2.powi(self.step as i32);
        let lr = S::lit(c.lr);
        let eps = S::lit(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = gd[i];
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        if params.iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_identical() {
        let init = Tensor::vector(vec![0.3, -1.2, 4.0]).unwrap();
        let mut params = vec![init.clone()];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for _ in 0..10 {
            adam.step(&mut params, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(params[0], init);
        assert_eq!(adam.steps(), 10);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut params = vec![Tensor::vector(vec![0.0, 0.0]).unwrap()];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let g = Tensor::vector(vec![2.5, -0.1]).unwrap();
        let mut prev = params[0].clone();
        for _ in 0..50 {
            adam.step(&mut params, std::slice::from_ref(&g)).unwrap();
            let cur = &params[0];
            assert!(cur.data()[0] < prev.data()[0]);
            assert!(cur.data()[1] > prev.data()[1]);
            prev = cur.clone();
        }
    }

    #[test]
    fn quadratic_converges() {
        // loss = (x - 3)^2, gradient 2(x - 3)
        let mut params = vec![Tensor::vector(vec![0.0f64]).unwrap()];
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2), &params);
        let mut converged_at = None;
        for step in 0..2000 {
            let x = params[0].data()[0];
            let g = Tensor::vector(vec![2.0 * (x - 3.0)]).unwrap();
            adam.step(&mut params, &[g]).unwrap();
            if (params[0].data()[0] - 3.0).abs() < 1e-3 && converged_at.is_none() {
                converged_at = Some(step);
            }
        }
        assert!(converged_at.is_some());
        assert!((params[0].data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::<f64>::zeros(&[2])];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        assert!(adam.step(&mut params, &[Tensor::zeros(&[3])]).is_err());
    }
}
