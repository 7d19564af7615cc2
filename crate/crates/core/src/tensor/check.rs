//! Central finite-difference gradient checking. The numeric side only ever
//! re-evaluates the forward scalar, so it stays independent of the backward
//! implementation it is used to verify.

use super::{backward, Arr, Tensor};

/// Builds a graph from raw input arrays and returns the leaves (in input
/// order) plus the scalar root.
pub type GraphBuilder<'a> = dyn Fn(&[Arr]) -> (Vec<Tensor>, Tensor) + 'a;

/// Central finite difference of `f` with respect to input `which`.
pub fn numeric_grad(f: &dyn Fn(&[Arr]) -> f64, inputs: &[Arr], which: usize, step: f64) -> Arr {
    let mut work: Vec<Arr> = inputs.to_vec();
    let mut grad = Arr::zeros(inputs[which].raw_dim());
    let n = inputs[which].len();
    for i in 0..n {
        let orig = work[which].as_slice().unwrap()[i];
        work[which].as_slice_mut().unwrap()[i] = orig + step;
        let fp = f(&work);
        work[which].as_slice_mut().unwrap()[i] = orig - step;
        let fm = f(&work);
        work[which].as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// `|a - n| / max(|a|, |n|, 1)` elementwise, maximized.
pub fn max_rel_err(analytic: &Arr, numeric: &Arr) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences for every input; returns the worst relative error.
pub fn scalar_fn_grad(build: &GraphBuilder<'_>, inputs: &[Arr], step: f64) -> f64 {
    let (leaves, root) = build(inputs);
    assert_eq!(leaves.len(), inputs.len());
    let grads = backward(&root);
    let eval = |xs: &[Arr]| build(xs).1.scalar_value();
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let numeric = numeric_grad(&eval, inputs, i, step);
        let analytic = grads
            .wrt(leaf)
            .cloned()
            .unwrap_or_else(|| Arr::zeros(inputs[i].raw_dim()));
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}
