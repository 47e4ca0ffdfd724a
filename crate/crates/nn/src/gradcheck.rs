//! Central finite-difference checks of analytic parameter gradients.

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Normwise relative error `|a - n| / max(|a|, |n|)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub error: f64,
    pub analytic_norm: f64,
}

/// Compares the gradient of `loss` with respect to every parameter tensor
/// against central differences with step `h`. `loss` builds the scalar in a
/// fresh graph from the given parameters.
pub fn check_params(
    params: &ParamStore<f64>,
    h: f64,
    loss: impl Fn(&ParamStore<f64>, &mut Graph<f64>) -> Var,
) -> Vec<GroupError> {
    let mut g = Graph::new();
    let out = loss(params, &mut g);
    let grads = g.backward(out).params(&g, params);
    let eval = |p: &ParamStore<f64>| {
        let mut g = Graph::new();
        let out = loss(p, &mut g);
        g.value(out).item()
    };
    let mut work = params.clone();
    let mut report = Vec::new();
    for (id, name, t) in params.iter() {
        let mut numeric = vec![0.0; t.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = t.data[i];
            work.get_mut(id).data[i] = x + h;
            let up = eval(&work);
            work.get_mut(id).data[i] = x - h;
            let down = eval(&work);
            work.get_mut(id).data[i] = x;
            *slot = (up - down) / (2.0 * h);
        }
        let analytic: &Tensor<f64> = &grads[id.index()];
        report.push(GroupError {
            name: name.to_string(),
            error: relative_error(&analytic.data, &numeric),
            analytic_norm: analytic.sq_norm().sqrt(),
        });
    }
    report
}

/// Same check for a graph input tensor.
pub fn check_input(input: &Tensor<f64>, h: f64, loss: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let out = loss(&mut g, x);
    let grads = g.backward(out);
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.rows, input.cols));
    let eval = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.input(t.clone());
        let out = loss(&mut g, x);
        g.value(out).item()
    };
    let mut work = input.clone();
    let numeric: Vec<f64> = (0..input.len())
        .map(|i| {
            let x = input.data[i];
            work.data[i] = x + h;
            let up = eval(&work);
            work.data[i] = x - h;
            let down = eval(&work);
            work.data[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect();
    relative_error(&analytic.data, &numeric)
}
