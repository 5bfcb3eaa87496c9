use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NumError, Result};
use crate::params::{Gradients, ParamStore};
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update to every parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if store.len() != self.m.len() || grads.len() != self.m.len() {
            return shape_err("adam", &[store.len(), grads.len()], &[self.m.len()]);
        }
        for (id, g) in grads.iter() {
            if store.get(id).shape() != g.shape() || self.m[id.index()].shape() != g.shape() {
                return shape_err("adam", store.get(id).shape(), g.shape());
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
                if !p[j].is_finite() {
                    return Err(NumError::NonFinite { op: "adam" });
                }
            }
        }
        Ok(())
    }
}

/// Adam for a single unconstrained scalar (used for dual variables).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: f64,
    pub v: f64,
}

impl ScalarAdam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: 0.0,
            v: 0.0,
        }
    }

    /// Returns the updated value.
    pub fn step(&mut self, value: f64, grad: f64) -> Result<f64> {
        if !grad.is_finite() {
            return Err(NumError::NonFinite { op: "scalar_adam" });
        }
        self.step += 1;
        let c = self.config;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * grad;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * grad * grad;
        let t = self.step as i32;
        let mhat = self.m / (1.0 - c.beta1.powi(t));
        let vhat = self.v / (1.0 - c.beta2.powi(t));
        let next = value - c.lr * mhat / (vhat.sqrt() + c.eps);
        if !next.is_finite() {
            return Err(NumError::NonFinite { op: "scalar_adam" });
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn one_param(x: f64) -> (ParamStore, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(x));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let (mut store, x) = one_param(1.25);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        let zero = Gradients::zeros_like(&store);
        adam.step(&mut store, &zero).unwrap();
        assert_eq!(store.get(x).item().unwrap(), 1.25);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let (mut store, _) = one_param(1.25);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        adam.step(&mut store, &Gradients::new(vec![Tensor::scalar(1.0)]))
            .unwrap();
        let (m0, v0) = (adam.m[0].item().unwrap(), adam.v[0].item().unwrap());
        let zero = Gradients::zeros_like(&store);
        adam.step(&mut store, &zero).unwrap();
        assert_eq!(adam.m[0].item().unwrap(), 0.9 * m0);
        assert_eq!(adam.v[0].item().unwrap(), 0.999 * v0);
        assert_eq!(adam.step_count(), 2);
    }

    #[test]
    fn first_step_on_square_moves_by_lr() {
        let (mut store, x) = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x).unwrap();
        let y = tape.mul(xv, xv).unwrap();
        let g = tape.backward(y, &store).unwrap();
        adam.step(&mut store, &g).unwrap();
        assert!((store.get(x).item().unwrap() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_steps_have_lr_magnitude() {
        let (mut store, x) = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        let g = Gradients::new(vec![Tensor::scalar(1.0)]);
        let mut prev = 0.0;
        for _ in 0..2 {
            adam.step(&mut store, &g).unwrap();
            let cur = store.get(x).item().unwrap();
            let delta = (cur - prev).abs();
            assert!((0.099..=0.101).contains(&delta), "{delta}");
            prev = cur;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut store, _) = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = Gradients::new(vec![Tensor::zeros(&[2])]);
        assert!(matches!(adam.step(&mut store, &g), Err(NumError::Shape { .. })));
        assert_eq!(adam.step_count(), 0);
    }
}
