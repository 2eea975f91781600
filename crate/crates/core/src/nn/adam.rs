//! Adam optimizer with decoupled weight decay.

use super::Scalar;
use ndarray::{Array, Dimension};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
    t: i32,
    state: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr: S::from_f64(lr),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            weight_decay: S::from_f64(weight_decay),
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once per optimization step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one parameter tensor. `decay` selects whether weight decay
    /// applies (weights yes, biases no).
    pub fn update<D: Dimension>(
        &mut self,
        name: &str,
        param: &mut Array<S, D>,
        grad: &Array<S, D>,
        decay: bool,
    ) {
        let n = param.len();
        let (m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
        debug_assert_eq!(m.len(), n, "parameter {name} changed size");
        let ps = param.as_slice_mut().expect("parameters are standard layout");
        let gs = grad.as_slice().expect("gradients are standard layout");
        let one = S::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        let wd = if decay { self.weight_decay } else { S::zero() };
        for i in 0..n {
            m[i] = self.beta1 * m[i] + (one - self.beta1) * gs[i];
            v[i] = self.beta2 * v[i] + (one - self.beta2) * gs[i] * gs[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            ps[i] = ps[i] - self.lr * (mhat / (vhat.sqrt() + self.eps) + wd * ps[i]);
        }
    }
}
