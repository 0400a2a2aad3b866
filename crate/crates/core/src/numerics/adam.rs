use serde::{Deserialize, Serialize};

use crate::error::{Result, SdmError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Adam with bias correction and one pair of moment buffers per tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(tensor_sizes: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: tensor_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second: tensor_sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor in place.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(SdmError::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (t, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[t].len() || g.len() != p.len() {
                return Err(SdmError::Shape(format!("tensor {t} size mismatch")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[t], &mut self.second[t]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(&[2], AdamConfig::default());
        let mut p = vec![1.0, -1.0];
        adam.update(&mut [&mut p], &[&[0.5, -2.0]], 0.1).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * sign(g) up to eps
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn second_step_by_hand() {
        let mut adam = Adam::new(&[1], AdamConfig::default());
        let mut p = vec![0.0];
        adam.update(&mut [&mut p], &[&[1.0]], 0.01).unwrap();
        adam.update(&mut [&mut p], &[&[0.0]], 0.01).unwrap();
        let m = 0.9 * 0.1;
        let v = 0.999 * 0.001;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected = -0.01 / (1.0 + 1e-8) - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut adam = Adam::new(&[3], AdamConfig::default());
        let mut p = vec![1.0, 2.0, 3.0];
        adam.update(&mut [&mut p], &[&[0.0; 3]], 1.0).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn tensor_count_is_checked() {
        let mut adam = Adam::new(&[1, 1], AdamConfig::default());
        let mut p = vec![0.0];
        assert!(adam.update(&mut [&mut p], &[&[0.0]], 0.1).is_err());
    }
}
