//! Adam with bias correction and (by default) decoupled weight decay.

use super::params::ParamSet;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// When true, weight decay is folded into the gradient (classic L2)
    /// instead of being applied to the parameters after the Adam update.
    pub coupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
            coupled_weight_decay: false,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, idx: usize) -> &Tensor2 {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &Tensor2 {
        &self.v[idx]
    }

    /// Applies one update using the gradients stored in `params`.
    ///
    /// The whole step is rejected, leaving parameters and moments untouched,
    /// if any trainable gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim("adam_step", self.m.len(), params.len()));
        }
        for p in params.iter().filter(|p| p.trainable) {
            if let Some(pos) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter '{}' at index {pos}",
                    p.name
                )));
            }
        }

        self.t += 1;
        let c = &self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for ((p, m), v) in params
            .entries_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if !p.trainable {
                continue;
            }
            let theta = p.value.data_mut();
            let grad = p.grad.data();
            for (((th, &g0), mi), vi) in theta
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = if c.coupled_weight_decay {
                    g0 + c.weight_decay * *th
                } else {
                    g0
                };
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *th -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                if !c.coupled_weight_decay {
                    *th -= c.lr * c.weight_decay * *th;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(values: &[f64]) -> ParamSet {
        let mut ps = ParamSet::new();
        for (i, &v) in values.iter().enumerate() {
            ps.push(format!("p{i}"), Tensor2::row_vector(vec![v]));
        }
        ps
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut ps = scalar_set(&[1.5, -2.0]);
        let before = ps.clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1, 0.0), &ps);
        for _ in 0..5 {
            adam.step(&mut ps).unwrap();
        }
        assert!(ps.values_bitwise_eq(&before));
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = scalar_set(&[0.0]);
        ps.set_grads(vec![Tensor2::row_vector(vec![1.0])]).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1, 0.0), &ps);
        adam.step(&mut ps).unwrap();
        // m_hat = v_hat = 1, so the update is lr / (1 + eps).
        let moved = -ps.value(0).data()[0];
        assert!((moved - 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{moved}");
        assert!(adam.second_moment(0).data()[0] >= 0.0);
    }

    #[test]
    fn identical_gradients_give_identical_updates() {
        let mut ps = scalar_set(&[0.3, 0.3]);
        let g = Tensor2::row_vector(vec![-0.7]);
        ps.set_grads(vec![g.clone(), g]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &ps);
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.value(0).data()[0].to_bits(), ps.value(1).data()[0].to_bits());
    }

    #[test]
    fn decoupled_decay_applies_after_update() {
        let mut ps = scalar_set(&[2.0]);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1, 0.5), &ps);
        adam.step(&mut ps).unwrap();
        // zero gradient: pure decay theta *= (1 - lr * wd)
        assert!((ps.value(0).data()[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_rejected_with_parameter_name() {
        let mut ps = scalar_set(&[1.0, 1.0]);
        ps.set_grads(vec![
            Tensor2::row_vector(vec![0.1]),
            Tensor2::row_vector(vec![f64::NAN]),
        ])
        .unwrap();
        let before = ps.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &ps);
        let err = adam.step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("p1"), "{err}");
        assert!(ps.values_bitwise_eq(&before));
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn frozen_parameters_never_change() {
        let mut ps = scalar_set(&[1.0, 1.0]);
        ps.entries_mut()[1].trainable = false;
        ps.set_grads(vec![
            Tensor2::row_vector(vec![1.0]),
            Tensor2::row_vector(vec![1.0]),
        ])
        .unwrap();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1, 0.02), &ps);
        adam.step(&mut ps).unwrap();
        assert_ne!(ps.value(0).data()[0], 1.0);
        assert_eq!(ps.value(1).data()[0], 1.0);
    }
}
