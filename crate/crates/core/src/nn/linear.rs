use super::{GradBundle, ParamKind, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// `x · wᵀ + bias` with `x: (..., in)`, `w: out × in`.
pub fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let mut y = x.matmul_nt(w)?;
    if let Some(b) = bias {
        let (_, out) = y.rows_cols();
        if b.len() != out {
            return Err(Error::shape(format!("bias length {} for {out} outputs", b.len())));
        }
        for row in y.data_mut().chunks_exact_mut(out) {
            for (v, &bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
    }
    Ok(y)
}

/// Gradients of [`linear_forward`]; the bias gradient is included when `with_bias` is set.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    with_bias: bool,
) -> Result<GradBundle<T>> {
    let (rows, _) = x.rows_cols();
    let (grows, out) = grad_out.rows_cols();
    let (wout, _) = w.dims2()?;
    if rows != grows || out != wout {
        return Err(Error::shape(format!(
            "linear backward: x {:?}, w {:?}, grad {:?}",
            x.shape(),
            w.shape(),
            grad_out.shape()
        )));
    }
    let grad_x = grad_out.matmul_nn(w)?.reshape(x.shape())?;
    let grad_w = grad_out.matmul_tn(x)?;
    let mut g = GradBundle::with_input(grad_x);
    g.insert(ParamKind::Weight, grad_w);
    if with_bias {
        let mut gb = vec![T::zero(); out];
        for row in grad_out.data().chunks_exact(out) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        g.insert(ParamKind::Bias, Tensor::from_vec(&[out], gb)?);
    }
    Ok(g)
}
