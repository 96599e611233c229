use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Default central-difference step for [`grad_check`].
pub const GRAD_CHECK_EPS: f64 = 1e-4;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences, evaluated in `f64`.
///
/// `f` builds the function on a fresh graph given the node holding `x`.
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::invalid(format!("grad_check step {eps} outside [1e-4, 1e-2]")));
    }
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.constant(t)?;
        let out = f(&mut g, id)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let id = g.param(x.clone())?;
    let out = f(&mut g, id)?;
    let analytic = g.backward(out)?.wrt(id)?.clone();

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
