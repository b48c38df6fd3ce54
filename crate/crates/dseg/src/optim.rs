//! Adam with bias correction and coupled L2 weight decay, plus the
//! step-exponential learning-rate schedule.

use indexmap::IndexMap;

use crate::params::ParamStore;
use crate::tensor::Elem;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("training integrity: trainable parameter {0:?} has no gradient")]
    MissingGradient(String),
}

/// Per-parameter first/second moment buffers keyed by parameter name.
pub struct Adam<T: Elem> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    state: IndexMap<String, (Vec<T>, Vec<T>)>,
    t: u64,
}

impl<T: Elem> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam { beta1, beta2, eps, weight_decay, state: IndexMap::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every trainable entry. Weight decay is folded into the
    /// gradient (g + wd*theta) before the moment updates; buffers are
    /// untouched.
    pub fn step(&mut self, params: &ParamStore<T>, lr: f64) -> Result<(), OptimError> {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let wd = T::from_f64(self.weight_decay);
        let eps = T::from_f64(self.eps);
        let lr = T::from_f64(lr);
        for (name, tensor) in params.iter_trainable() {
            let grad = tensor
                .grad()
                .ok_or_else(|| OptimError::MissingGradient(name.to_string()))?;
            let n = grad.len();
            let (m, v) = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let mut theta = tensor.to_vec();
            for i in 0..n {
                let g = grad[i] + wd * theta[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.set_data(&theta);
        }
        Ok(())
    }
}

/// lr0 * gamma^floor(epoch / step).
pub fn lr_at_epoch(epoch: usize, lr0: f64, gamma: f64, step: usize) -> f64 {
    lr0 * gamma.powi((epoch / step) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_matches_hand_evaluation() {
        // theta=0, g=1, lr=0.1, wd=0: m_hat=1, v_hat=1, theta' = -0.1/(1+eps)
        let mut ps = ParamStore::<f64>::new();
        let p = Tensor::scalar(0.0);
        ps.register("w", p.clone(), true).unwrap();
        p.accumulate_grad(&[1.0]);
        let mut adam = Adam::new(0.9, 0.999, 1e-8, 0.0);
        adam.step(&ps, 0.1).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_parameters() {
        let mut ps = ParamStore::<f64>::new();
        let p = Tensor::scalar(3.5);
        ps.register("w", p.clone(), true).unwrap();
        p.accumulate_grad(&[0.0]);
        let mut adam = Adam::new(0.9, 0.999, 1e-8, 0.0);
        adam.step(&ps, 0.1).unwrap();
        assert_eq!(p.item(), 3.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut ps = ParamStore::<f64>::new();
        ps.register("w", Tensor::scalar(0.0), true).unwrap();
        let mut adam = Adam::new(0.9, 0.999, 1e-8, 0.0);
        assert!(matches!(adam.step(&ps, 0.1), Err(OptimError::MissingGradient(_))));
    }

    #[test]
    fn schedule_decays_every_step_epochs() {
        assert_eq!(lr_at_epoch(0, 1e-4, 0.9, 10), 1e-4);
        assert_eq!(lr_at_epoch(9, 1e-4, 0.9, 10), 1e-4);
        assert!((lr_at_epoch(10, 1e-4, 0.9, 10) - 9e-5).abs() < 1e-18);
        assert_eq!(lr_at_epoch(25, 1.0, 1.0, 10), 1.0);
    }
}
