//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::tensor::Tensor;

/// Worst disagreement found for one input.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    /// Largest per-entry relative error (see [`relative_error`]).
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `max |a - n|` over the array divided by the largest gradient
    /// magnitude in the array (either route).
    pub array_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a floor on the denominator so entries whose true
/// gradient is essentially zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients with central differences.
///
/// `loss` receives a fresh graph and the current input values as parameter
/// vars and must return a scalar var. Every entry of every input is
/// perturbed by `±step`.
pub fn check_gradients<L>(
    inputs: &[(String, Tensor<f64>)],
    step: f64,
    floor: f64,
    mut loss: L,
) -> Result<Vec<GradReport>>
where
    L: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| graph.param(t.clone())).collect();
    let out = loss(&mut graph, &vars)?;
    graph.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| graph.grad_tensor(v)).collect();
    drop(graph);

    let mut eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(inputs.len());
    for (p, (name, _)) in inputs.iter().enumerate() {
        let mut report = GradReport {
            name: name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            array_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut scale = 0.0f64;
        for e in 0..values[p].numel() {
            let orig = values[p].data()[e];
            values[p].data_mut()[e] = orig + step;
            let up = eval(&values)?;
            values[p].data_mut()[e] = orig - step;
            let down = eval(&values)?;
            values[p].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[p].data()[e];
            let rel = relative_error(a, numeric, floor);
            scale = scale.max(a.abs()).max(numeric.abs());
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        report.array_rel_error = if scale > 0.0 { report.max_abs_error / scale } else { 0.0 };
        reports.push(report);
    }
    Ok(reports)
}
