use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Mean softmax cross-entropy over the batch and its gradient `(softmax − onehot) / batch`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let mut grad = Tensor::zeros(&[b, c]);
    let mut total = 0.0f64;
    let inv_b = 1.0 / b as f64;
    for ((row, g), &label) in logits
        .data()
        .chunks_exact(c)
        .zip(grad.data_mut().chunks_exact_mut(c))
        .zip(labels)
    {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + z.ln();
        total += log_z - row[label].as_f64();
        for (j, (gj, v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v.as_f64() - log_z).exp();
            let onehot = if j == label { 1.0 } else { 0.0 };
            *gj = T::of((p - onehot) * inv_b);
        }
    }
    Ok((T::of(total * inv_b), grad))
}
