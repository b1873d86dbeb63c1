use serde::{Deserialize, Serialize};

use super::{GradBundle, Mode, ParamKind, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::serde_bits;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BatchNormState<T: Real> {
    #[serde(with = "serde_bits")]
    pub scale: Vec<T>,
    #[serde(with = "serde_bits")]
    pub shift: Vec<T>,
    #[serde(with = "serde_bits")]
    pub running_mean: Vec<T>,
    #[serde(with = "serde_bits")]
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Frozen eval-mode affine map `y = (x − mean) · mul + shift` per channel.
///
/// The simulated and packed inference paths both go through [`EvalCoeffs::apply`], which
/// keeps their floating-point results identical.
#[derive(Clone, Debug)]
pub struct EvalCoeffs<T> {
    mean: Vec<T>,
    mul: Vec<T>,
    shift: Vec<T>,
}

impl<T: Real> EvalCoeffs<T> {
    #[inline]
    pub fn apply(&self, x: T, channel: usize) -> T {
        (x - self.mean[channel]) * self.mul[channel] + self.shift[channel]
    }
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn eval_coeffs(&self) -> EvalCoeffs<T> {
        let eps = T::of(self.eps);
        EvalCoeffs {
            mean: self.running_mean.clone(),
            mul: self
                .scale
                .iter()
                .zip(&self.running_var)
                .map(|(&g, &v)| g / (v + eps).sqrt())
                .collect(),
            shift: self.shift.clone(),
        }
    }
}

/// Values kept from the forward pass for [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

/// Normalizes `x: (..., C)` per channel over all leading positions.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (rows, c) = x.rows_cols();
    if c != state.channels() {
        return Err(Error::shape(format!(
            "batch norm over {c} channels with state for {}",
            state.channels()
        )));
    }
    let mut y = Tensor::zeros(x.shape());
    let mut x_hat = Tensor::zeros(x.shape());
    let inv_std: Vec<T>;
    match mode {
        Mode::Train => {
            if rows < 2 {
                return Err(Error::BatchTooSmall(rows));
            }
            let mut sum = vec![0.0f64; c];
            for row in x.data().chunks_exact(c) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v.as_f64();
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
            let mut sq = vec![0.0f64; c];
            for row in x.data().chunks_exact(c) {
                for ((s, &v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    let d = v.as_f64() - m;
                    *s += d * d;
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / rows as f64).collect();
            inv_std = var.iter().map(|v| T::of(1.0 / (v + state.eps).sqrt())).collect();
            let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
            for ((row, yr), hr) in x
                .data()
                .chunks_exact(c)
                .zip(y.data_mut().chunks_exact_mut(c))
                .zip(x_hat.data_mut().chunks_exact_mut(c))
            {
                for j in 0..c {
                    let h = (row[j] - mean_t[j]) * inv_std[j];
                    hr[j] = h;
                    yr[j] = state.scale[j] * h + state.shift[j];
                }
            }
            let m = state.momentum;
            let unbias = rows as f64 / (rows as f64 - 1.0);
            for j in 0..c {
                let rm = state.running_mean[j].as_f64();
                let rv = state.running_var[j].as_f64();
                state.running_mean[j] = T::of((1.0 - m) * rm + m * mean[j]);
                state.running_var[j] = T::of((1.0 - m) * rv + m * var[j] * unbias);
            }
        }
        Mode::Eval => {
            let coeffs = state.eval_coeffs();
            let eps = T::of(state.eps);
            inv_std = state
                .running_var
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            for ((row, yr), hr) in x
                .data()
                .chunks_exact(c)
                .zip(y.data_mut().chunks_exact_mut(c))
                .zip(x_hat.data_mut().chunks_exact_mut(c))
            {
                for j in 0..c {
                    yr[j] = coeffs.apply(row[j], j);
                    hr[j] = (row[j] - state.running_mean[j]) * inv_std[j];
                }
            }
        }
    }
    Ok((y, BnCache { x_hat, inv_std, mode }))
}

pub fn batchnorm_backward<T: Real>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
    state: &BatchNormState<T>,
) -> Result<GradBundle<T>> {
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::shape(format!(
            "batch norm backward grad {:?} vs cache {:?}",
            grad_out.shape(),
            cache.x_hat.shape()
        )));
    }
    let (rows, c) = grad_out.rows_cols();
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (g, h) in grad_out
        .data()
        .chunks_exact(c)
        .zip(cache.x_hat.data().chunks_exact(c))
    {
        for j in 0..c {
            sum_dy[j] += g[j].as_f64();
            sum_dy_xhat[j] += (g[j] * h[j]).as_f64();
        }
    }
    let mut dx = Tensor::zeros(grad_out.shape());
    match cache.mode {
        Mode::Train => {
            let n = rows as f64;
            let k: Vec<T> = (0..c)
                .map(|j| state.scale[j] * cache.inv_std[j] / T::of(n))
                .collect();
            let mdy: Vec<T> = sum_dy.iter().map(|&s| T::of(s)).collect();
            let mdyh: Vec<T> = sum_dy_xhat.iter().map(|&s| T::of(s)).collect();
            let nt = T::of(n);
            for ((g, h), d) in grad_out
                .data()
                .chunks_exact(c)
                .zip(cache.x_hat.data().chunks_exact(c))
                .zip(dx.data_mut().chunks_exact_mut(c))
            {
                for j in 0..c {
                    d[j] = k[j] * (nt * g[j] - mdy[j] - h[j] * mdyh[j]);
                }
            }
        }
        Mode::Eval => {
            for (g, d) in grad_out
                .data()
                .chunks_exact(c)
                .zip(dx.data_mut().chunks_exact_mut(c))
            {
                for j in 0..c {
                    d[j] = g[j] * state.scale[j] * cache.inv_std[j];
                }
            }
        }
    }
    let mut bundle = GradBundle::with_input(dx);
    bundle.insert(
        ParamKind::BnScale,
        Tensor::from_vec(&[c], sum_dy_xhat.iter().map(|&v| T::of(v)).collect())?,
    );
    bundle.insert(
        ParamKind::BnShift,
        Tensor::from_vec(&[c], sum_dy.iter().map(|&v| T::of(v)).collect())?,
    );
    Ok(bundle)
}
