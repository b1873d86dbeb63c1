use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Per-channel maximum over the points axis of `x: batch × points × channels`.
///
/// Returns the pooled `batch × channels` tensor and, for every output, the point index it
/// came from. Ties resolve to the lowest index.
pub fn maxpool_points_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, n, c] = x.shape()[..] else {
        return Err(Error::shape(format!(
            "max pool expects batch x points x channels, got {:?}",
            x.shape()
        )));
    };
    if n == 0 {
        return Err(Error::EmptyPoints);
    }
    let mut out = Tensor::zeros(&[b, c]);
    let mut arg = vec![0usize; b * c];
    for bi in 0..b {
        let cloud = &x.data()[bi * n * c..(bi + 1) * n * c];
        let o = &mut out.data_mut()[bi * c..(bi + 1) * c];
        let a = &mut arg[bi * c..(bi + 1) * c];
        o.copy_from_slice(&cloud[..c]);
        for p in 1..n {
            let row = &cloud[p * c..(p + 1) * c];
            for j in 0..c {
                if row[j] > o[j] {
                    o[j] = row[j];
                    a[j] = p;
                }
            }
        }
    }
    Ok((out, arg))
}

/// Routes `grad: batch × channels` back to the argmax positions of a `batch × points ×
/// channels` input.
pub fn maxpool_points_backward<T: Real>(
    grad: &Tensor<T>,
    indices: &[usize],
    points: usize,
) -> Result<Tensor<T>> {
    let (b, c) = grad.dims2()?;
    if indices.len() != b * c {
        return Err(Error::shape(format!(
            "{} pool indices for a {b}x{c} gradient",
            indices.len()
        )));
    }
    let mut dx = Tensor::zeros(&[b, points, c]);
    for bi in 0..b {
        for j in 0..c {
            let p = indices[bi * c + j];
            if p >= points {
                return Err(Error::shape(format!("pool index {p} >= {points} points")));
            }
            dx.data_mut()[(bi * points + p) * c + j] = grad.data()[bi * c + j];
        }
    }
    Ok(dx)
}
