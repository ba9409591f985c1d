//! Hessian-vector products by differentiating `<∇L, v>` a second time.

use crate::{Error, Result, Scalar};

use super::{Graph, Tensor, Var};

/// `H·v` for the scalar loss built by `loss_fn` over parameter nodes.
///
/// `v` holds one tensor per parameter with matching shapes.
pub fn hvp<T: Scalar, F>(params: &[Tensor<T>], v: &[Tensor<T>], loss_fn: F) -> Result<Vec<Tensor<T>>>
where
    F: for<'g> Fn(&[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    if params.len() != v.len() {
        return Err(Error::dim(format!(
            "hvp direction has {} tensors for {} parameters",
            v.len(),
            params.len()
        )));
    }
    for (p, d) in params.iter().zip(v) {
        if p.shape() != d.shape() {
            return Err(Error::dim(format!(
                "hvp direction shape {:?} for parameter {:?}",
                d.shape(),
                p.shape()
            )));
        }
    }
    let g = Graph::new();
    let leaves: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = loss_fn(&leaves)?;
    let grads = g.grad(loss, &leaves, true)?;
    let mut inner: Option<Var<'_, T>> = None;
    for (gi, vi) in grads.iter().zip(v) {
        let term = gi.mul(g.constant(vi.clone()))?.sum_all()?;
        inner = Some(match inner {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    match inner {
        None => Ok(Vec::new()),
        Some(inner) => g.gradients(inner, &leaves),
    }
}

/// [`hvp`] for a single flat parameter vector.
pub fn hvp_flat<T: Scalar, F>(params: &[T], v: &[T], loss_fn: F) -> Result<Vec<T>>
where
    F: for<'g> Fn(Var<'g, T>) -> Result<Var<'g, T>>,
{
    if params.len() != v.len() {
        return Err(Error::dim(format!(
            "hvp direction of length {} for {} parameters",
            v.len(),
            params.len()
        )));
    }
    let p = Tensor::new(vec![params.len()], params.to_vec())?;
    let d = Tensor::new(vec![v.len()], v.to_vec())?;
    let mut out = hvp(&[p], &[d], |vars| loss_fn(vars[0]))?;
    Ok(out.pop().map(Tensor::into_data).unwrap_or_default())
}
