//! Finite-difference gradient oracle shared by unit tests.

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Norm-relative discrepancy between analytic and central-difference
/// gradients of the scalar produced by `f` with respect to every input.
pub fn gradcheck<F>(inputs: &[Tensor], step: f64, f: F) -> f64
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);

    let eval = |xs: &[Tensor]| {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        g.scalar(f(&g, &vars))
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.raw_dim()));
        let mut numeric = Tensor::zeros(input.raw_dim());
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].as_slice_mut().unwrap()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].as_slice_mut().unwrap()[i] -= step;
            numeric.as_slice_mut().unwrap()[i] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        let diff = (&analytic - &numeric).mapv(|x| x * x).sum().sqrt();
        let scale = analytic.mapv(|x| x * x).sum().sqrt().max(numeric.mapv(|x| x * x).sum().sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    worst
}
