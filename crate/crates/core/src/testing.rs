//! Finite-difference gradient oracle shared by the unit tests.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Largest relative error `|a - n| / max(|a|, |n|)` (norms over each input)
/// between the tape gradient and central differences of `build`'s scalar
/// output with respect to every input tensor.
pub(crate) fn grad_rel_error(
    build: impl Fn(&Graph<f64>, &[Var]) -> Var,
    inputs: &[Tensor<f64>],
    h: f64,
) -> f64 {
    let eval = |values: &[Tensor<f64>]| {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&g, &vars);
        g.scalar(out)
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&g, &vars);
    let grads = g.backward(out);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for j in 0..input.len() {
            let mut values = inputs.to_vec();
            values[i].data_mut()[j] += h;
            let plus = eval(&values);
            values[i].data_mut()[j] -= 2.0 * h;
            let minus = eval(&values);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}
