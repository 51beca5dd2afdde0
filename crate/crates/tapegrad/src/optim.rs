//! First-order optimizers over a [`ParamStore`].
//!
//! Both optimizers visit parameters in name order and skip any parameter
//! without a gradient, so a step is a no-op for untouched parts of a model.

use crate::tape::Gradients;
use crate::{Array, ParamStore};
use std::collections::BTreeMap;

/// Plain stochastic gradient descent: `p <- p - lr * g`.
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step(&mut self, store: &ParamStore, grads: &Gradients) {
        for (name, param) in store.iter() {
            let Some(g) = grads.by_name(name) else {
                continue;
            };
            let mut value = param.value().as_ref().clone();
            value.add_scaled(g, -self.lr);
            param.set(value);
        }
    }
}

/// Adam with bias correction (Kingma & Ba 2015). Defaults: lr 1e-3,
/// beta1 0.9, beta2 0.999, eps 1e-8.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: BTreeMap<String, (Array, Array)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param) in store.iter() {
            let Some(g) = grads.by_name(name) else {
                continue;
            };
            let (m, v) = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| (Array::zeros(g.shape()), Array::zeros(g.shape())));
            let mut value = param.value().as_ref().clone();
            let value_data = value.data_mut();
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                value_data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            param.set(value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{backward, Tape};

    #[test]
    fn sgd_leaves_params_without_gradient_unchanged() {
        let mut store = ParamStore::new();
        let used = store.create("used", Array::vector(&[1.0]));
        let unused = store.create("unused", Array::vector(&[2.0]));
        let tape = Tape::new();
        let x = tape.param(&used);
        let loss = x.mul(&x).sum_all();
        let grads = backward(&loss);
        Sgd::new(0.1).step(&store, &grads);
        assert_eq!(used.value().data(), &[1.0 - 0.1 * 2.0]);
        assert_eq!(unused.value().data(), &[2.0]);
    }

    #[test]
    fn adam_matches_reference_recomputation_on_quadratic() {
        // Minimise f(p) = 0.5 * sum(p^2); gradient is p itself. The reference
        // below recomputes the Adam recurrences independently of the tape.
        let mut store = ParamStore::new();
        let p = store.create("p", Array::vector(&[1.0, -3.0]));
        let mut opt = Adam::new(0.01);

        let mut reference = [1.0, -3.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..=25u64 {
            let tape = Tape::new();
            let x = tape.param(&p);
            let loss = x.mul(&x).sum_all().scale(0.5);
            let grads = backward(&loss);
            opt.step(&store, &grads);

            for i in 0..2 {
                let g = reference[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let m_hat = m[i] / (1.0 - 0.9f64.powi(t as i32));
                let v_hat = v[i] / (1.0 - 0.999f64.powi(t as i32));
                reference[i] -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
            }
            for i in 0..2 {
                let got = p.value().data()[i];
                assert!(
                    (got - reference[i]).abs() < 1e-12,
                    "step {t} index {i}: {got} vs {}",
                    reference[i]
                );
            }
        }
    }
}
