use serde::{Deserialize, Serialize};

use super::ops::Scalar;

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

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let alpha = T::from_f64(lr * c2.sqrt() / c1);
        let eps = T::from_f64(self.cfg.eps * c2.sqrt());
        let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p = *p - alpha * *m / (v.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = AdamState::<f64>::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        s.step(&mut p, &[0.0; 3], 0.01);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_learning_rate() {
        let mut s = AdamState::<f64>::new(1, AdamConfig::default());
        let mut p = vec![0.0];
        s.step(&mut p, &[1.0], 0.1);
        // m_hat = 1, v_hat = 1, step = -lr / (1 + eps)
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-12, "{}", p[0]);
        s.step(&mut p, &[1.0], 0.1);
        assert!((p[0] - 2.0 * want).abs() < 1e-9);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut s = AdamState::<f32>::new(2, AdamConfig::default());
            let mut p = vec![0.3f32, -0.7];
            for k in 0..20 {
                let g = [p[0] - 1.0 + k as f32 * 0.01, p[1].sin()];
                s.step(&mut p, &g, 0.05);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
