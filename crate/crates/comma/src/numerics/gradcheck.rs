//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, TensorId};
use crate::numerics::tensor::Tensor;

/// Standard step for the central-difference oracle.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Compare the analytic gradient of a scalar function against central finite
/// differences, one parameter tensor at a time.
///
/// `f` rebuilds the scalar on a fresh graph from leaves holding the supplied
/// parameter values; it is evaluated once with gradients enabled and `2·n`
/// more times (forward only) for the perturbed coordinates. Returns the
/// maximum over all coordinates of
/// `|analytic − central| / max(1, |central|)`.
pub fn finite_diff_check_multi<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = values
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = with_grad;
                g.leaf(t)
            })
            .collect();
        let root = f(&mut g, &ids)?;
        let value = g.value(root).item().map_err(|_| {
            Error::Contract("finite_diff_check requires a scalar-valued function".into())
        })?;
        if !with_grad {
            return Ok((value, None));
        }
        g.backward(root)?;
        let grads = ids
            .iter()
            .map(|&id| {
                g.grad(id)
                    .map(|s| s.to_vec())
                    .ok_or_else(|| Error::Contract("missing gradient on parameter leaf".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((value, Some(grads)))
    };

    let (_, grads) = eval(params, true)?;
    let grads = grads.expect("gradients requested");

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, base) in params.iter().enumerate() {
        for i in 0..base.numel() {
            let orig = base.data()[i];
            work[p].data_mut()[i] = orig + eps;
            let (fp, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig - eps;
            let (fm, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (grads[p][i] - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Single-parameter form of [`finite_diff_check_multi`].
pub fn finite_diff_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    finite_diff_check_multi(|g, ids| f(g, ids[0]), std::slice::from_ref(theta), eps)
}
