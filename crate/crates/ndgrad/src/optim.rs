use crate::error::{GradError, Result};
use crate::params::ParamSet;

/// Adam hyperparameters. Weight decay is decoupled from the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta_m1: f64,
    pub beta_m2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta_m1: 0.9,
            beta_m2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
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

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update using the gradients stored on `params`.
    /// Parameters without a gradient buffer see a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(GradError::Invalid {
                op: "adam_step",
                msg: format!(
                    "state tracks {} tensors, got {}",
                    self.first_moment.len(),
                    params.len()
                ),
            });
        }
        for (t, m) in params.tensors_mut().zip(&self.first_moment) {
            if t.numel() != m.len() {
                return Err(GradError::Shape {
                    op: "adam_step",
                    lhs: t.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta_m1,
            beta_m2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta_m1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta_m2.powi(self.step_count as i32);
        for ((t, m), v) in params
            .tensors_mut()
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            let grad: Vec<f64> = match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            };
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta_m1 * m[i] + (1.0 - beta_m1) * g;
                v[i] = beta_m2 * v[i] + (1.0 - beta_m2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(p: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::vector(vec![p]));
        ps
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = single(1.0);
        let mut adam = AdamState::new(&ps, AdamConfig::with_lr(0.1));
        ps.tensors_mut().next().unwrap().accumulate_grad(&[1.0]).unwrap();
        adam.step(&mut ps).unwrap();
        // m_hat = 1, v_hat = 1 -> p = 1 - 0.1 / (1 + 1e-8)
        let p = ps.iter().next().unwrap().2.data()[0];
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = single(2.5);
        let mut adam = AdamState::new(&ps, AdamConfig::with_lr(0.1));
        ps.tensors_mut().next().unwrap().accumulate_grad(&[0.0]).unwrap();
        for _ in 0..5 {
            adam.step(&mut ps).unwrap();
        }
        assert_eq!(ps.iter().next().unwrap().2.data()[0], 2.5);
    }

    #[test]
    fn mismatched_state_is_an_error() {
        let ps = single(1.0);
        let mut adam = AdamState::new(&ps, AdamConfig::default());
        let mut other = ParamSet::new();
        other.add("q", Tensor::vector(vec![1.0, 2.0]));
        assert!(adam.step(&mut other).is_err());
    }
}
