//! Finite-difference helpers shared by unit and integration tests.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

/// Adds `delta` to one flat entry of `var` in place.
pub fn perturb(var: &Var, index: usize, delta: f64) {
    let shape = var.shape().clone();
    let mut values: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    values[index] += delta;
    var.set(&Tensor::from_vec(values, shape, var.device()).unwrap()).unwrap();
}

/// `(f(x + h) - f(x - h)) / 2h` for one flat entry of `var`; the entry is
/// restored afterwards.
pub fn central_difference(var: &Var, index: usize, h: f64, mut f: impl FnMut() -> f64) -> f64 {
    let original: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    let shape = var.shape().clone();
    let set = |x: f64| {
        let mut v = original.clone();
        v[index] = x;
        var.set(&Tensor::from_vec(v, shape.clone(), var.device()).unwrap()).unwrap();
    };
    set(original[index] + h);
    let plus = f();
    set(original[index] - h);
    let minus = f();
    set(original[index]);
    (plus - minus) / (2.0 * h)
}

/// Flattened gradient for `var`, zeros when it took no part in the graph.
pub fn grad_of(grads: &GradStore, var: &Var) -> Vec<f64> {
    match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
        None => vec![0.0; var.elem_count()],
    }
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(floor)
}
