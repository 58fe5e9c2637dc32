//! Adam and the step-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for a list of parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Adam {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::ParamCount {
                expected: self.first.len(),
                got: grads.len().min(params.len()),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::shape("adam_step", &[p.shape(), g.shape()]));
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
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr0 * 0.5^floor(epoch / halving)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepHalving {
    pub lr0: f64,
    pub halving_epochs: usize,
}

impl Default for StepHalving {
    fn default() -> Self {
        StepHalving {
            lr0: 5e-4,
            halving_epochs: 200,
        }
    }
}

impl StepHalving {
    pub fn rate(&self, epoch: usize) -> f64 {
        let halvings = epoch / self.halving_epochs.max(1);
        self.lr0 * 0.5f64.powi(halvings as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::row(&[1.0, -2.0, 3.0])];
        let before = params.clone();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            adam.step(&mut params, &[Tensor::zeros(1, 3)]).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![Tensor::row(&[0.0, 10.0])];
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &params);
        adam.step(&mut params, &[Tensor::full(1, 2, 1.0)]).unwrap();
        let expected = cfg.lr / (1.0 + cfg.eps);
        assert!((params[0].data()[0] + expected).abs() < 1e-15);
        assert!((params[0].data()[1] - (10.0 - expected)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_bowl_converges_in_windows() {
        // f(p) = sum (p - target)^2
        let target = [1.5, -0.5, 0.25];
        let mut params = vec![Tensor::row(&[0.0, 0.0, 0.0])];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let dist = |p: &Tensor| -> f64 {
            p.data()
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut window_start = dist(&params[0]);
        for step in 1..=100 {
            let g: Vec<f64> = params[0]
                .data()
                .iter()
                .zip(target)
                .map(|(a, b)| 2.0 * (a - b))
                .collect();
            adam.step(&mut params, &[Tensor::row(&g)]).unwrap();
            if step % 10 == 0 {
                let d = dist(&params[0]);
                assert!(d < window_start, "no progress in window ending {step}");
                window_start = d;
            }
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut params = vec![Tensor::row(&[0.0, 1.0])];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        assert!(adam.step(&mut params, &[Tensor::zeros(1, 3)]).is_err());
    }

    #[test]
    fn schedule_halves() {
        let s = StepHalving::default();
        assert_eq!(s.rate(0), 0.0005);
        assert_eq!(s.rate(199), 0.0005);
        assert_eq!(s.rate(200), 0.00025);
        assert_eq!(s.rate(399), 0.00025);
        assert_eq!(s.rate(400), 0.000125);
    }
}
