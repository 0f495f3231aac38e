//! Central finite-difference validation of reverse-mode gradients.

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Evaluates `f` at `point` and compares its reverse-mode gradient against
/// central differences, coordinate by coordinate.
///
/// `f` receives a fresh graph and the leaf holding the input and must
/// return a single-element node. The result is
/// `max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-12)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return invalid("finite_difference_check", format!("eps {eps} outside (0, 1e-2]"));
    }
    let analytic = analytic_gradient(&f, point)?;
    let numeric = numeric_gradient(&f, point, eps)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + 1e-12))
        .fold(0.0, f64::max))
}

pub fn analytic_gradient<F>(f: &F, point: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    Ok(grads.get_or_zeros(x, point.shape()))
}

pub fn numeric_gradient<F>(f: &F, point: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p);
        let y = f(&mut g, x)?;
        let v = g.value(y).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                op: "finite_difference_check",
            })
        }
    };
    let mut out = vec![0.0; point.len()];
    let mut probe = point.clone();
    for (i, slot) in out.iter_mut().enumerate() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = x0 - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = x0;
        *slot = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(point.shape().to_vec(), out)
}
