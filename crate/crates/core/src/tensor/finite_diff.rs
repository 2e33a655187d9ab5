//! Gradient checking against central differences.

use super::array::Array;
use super::graph::{Graph, Tensor};
use super::TensorError;

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare the tape gradient of a scalar-valued function against central
/// differences at `x0`.
///
/// `f` must build the same computation for the same input value; it is
/// called once for the analytic gradient and twice per coordinate for the
/// numeric one. `step` is the probe half-width and must lie in
/// [1e-7, 1e-3]. Relative error uses max(|analytic|, |numeric|) + 1e-12 as
/// the denominator, so zero gradients compare cleanly.
pub fn finite_diff_check<F>(f: F, x0: &Array, step: f64) -> Result<FiniteDiffReport, TensorError>
where
    F: Fn(&Graph, &Tensor) -> Result<Tensor, TensorError>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(TensorError::Domain {
            op: "finite_diff_check",
            value: step,
        });
    }

    let graph = Graph::new();
    let x = graph.param(x0.clone());
    let y = f(&graph, &x)?;
    y.backward()?;
    let analytic = x
        .grad()
        .unwrap_or_else(|| Array::zeros(x0.shape()))
        .data()
        .to_vec();

    let eval = |probe: &Array| -> Result<f64, TensorError> {
        let g = Graph::new();
        let xt = g.param(probe.clone());
        f(&g, &xt)?.item()
    };

    let mut numeric = Vec::with_capacity(x0.numel());
    for i in 0..x0.numel() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += step;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(&plus)? - eval(&minus)?) / (2.0 * step));
    }

    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / (a.abs().max(n.abs()) + 1e-12);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(FiniteDiffReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}
