use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::params::ParamSet;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    /// Updates every parameter that has a gradient.
    pub fn step(&self, state: &mut AdamState, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) {
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if state.m.get(name).is_none() {
                state.m.insert(name.clone(), Tensor::zeros(p.raw_dim()));
                state.v.insert(name.clone(), Tensor::zeros(p.raw_dim()));
            }
            let m = state.m.get_mut(name).unwrap();
            let v = state.v.get_mut(name).unwrap();
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + self.weight_decay * *p;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_shape_vec(IxDyn(&[2]), vec![1.0, -1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::from_shape_vec(IxDyn(&[2]), vec![0.3, -2.0]).unwrap());
        let opt = Adam::new(0.1, 0.0);
        let mut s = AdamState::default();
        opt.step(&mut s, &mut p, &g);
        let w = p.expect("w");
        assert!((w[[0]] - 0.9).abs() < 1e-6 && (w[[1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_elem(IxDyn(&[3]), 5.0));
        let opt = Adam::new(0.05, 1e-5);
        let mut s = AdamState::default();
        for _ in 0..2000 {
            let mut g = BTreeMap::new();
            g.insert("w".to_string(), p.expect("w").mapv(|w| 2.0 * (w - 1.0)));
            opt.step(&mut s, &mut p, &g);
        }
        assert!(p.expect("w").iter().all(|w| (w - 1.0).abs() < 1e-2));
    }
}
