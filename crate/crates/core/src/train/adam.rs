//! Adam with bias-corrected moments, over flat parameter vectors.

use crate::error::{Error, Result};
use crate::weightnet::checkpoint::MomentState;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: MomentState,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: MomentState {
                step: 0,
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
            },
        }
    }

    pub fn with_state(lr: f64, state: MomentState) -> Self {
        Adam {
            state,
            ..Adam::new(lr, 0)
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let s = &mut self.state;
        if params.len() != grads.len() || params.len() != s.m.len() {
            return Err(Error::InvalidInput(format!(
                "adam shapes differ: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                s.m.len()
            )));
        }
        s.step += 1;
        let t = s.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g;
            s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = s.m[i] / c1;
            let vhat = s.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut opt = Adam::new(1e-3, 2);
        opt.state.m = vec![1.0, -2.0];
        opt.state.v = vec![4.0, 1.0];
        opt.state.step = 5;
        let mut p = vec![0.5, 0.25];
        let before = p.clone();
        opt.lr = 0.0;
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.state.m, vec![0.9, -1.8]);
        assert!((opt.state.v[0] - 4.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_follows_closed_form() {
        // with g constant, m̂ₜ = g and v̂ₜ = g² for every t, so each step is lr·g/(|g|+eps)
        let g = [0.3, -2.0, 1e-3];
        let mut opt = Adam::new(0.01, 3);
        let mut p = vec![0.0; 3];
        for t in 1..=200 {
            opt.step(&mut p, &g).unwrap();
            for i in 0..3 {
                let expected = -(t as f64) * 0.01 * g[i] / (g[i].abs() + 1e-8);
                assert!((p[i] - expected).abs() < 1e-9 * t as f64, "t={t} i={i}");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = Adam::new(1e-3, 2);
        assert!(opt.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
