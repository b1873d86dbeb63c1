use serde::{Deserialize, Serialize};

use super::{GradBundle, ParamKind, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::serde_bits;

pub const DEFAULT_SLOPE: f64 = 0.25;
/// Smallest slope kept after an optimizer step. A negative slope would map every input to a
/// positive value, so a following sign would become constant.
pub const SLOPE_FLOOR: f64 = 0.01;

/// Learnable negative-side slope shared by all channels of a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PReLUState<T: Real> {
    #[serde(with = "serde_bits::scalar")]
    pub slope: T,
}

impl<T: Real> Default for PReLUState<T> {
    fn default() -> Self {
        PReLUState {
            slope: T::of(DEFAULT_SLOPE),
        }
    }
}

impl<T: Real> PReLUState<T> {
    /// Raises the slope to [`SLOPE_FLOOR`]; NaN also maps to the floor.
    pub fn clamp_slope(&mut self) {
        let floor = T::of(SLOPE_FLOOR);
        if self.slope.is_nan() || self.slope < floor {
            self.slope = floor;
        }
    }

    #[inline]
    pub fn apply(&self, x: T) -> T {
        if x > T::zero() {
            x
        } else {
            self.slope * x
        }
    }
}

pub fn prelu_forward<T: Real>(x: &Tensor<T>, state: &PReLUState<T>) -> Tensor<T> {
    x.map(|v| state.apply(v))
}

/// Gradients of [`prelu_forward`] given the forward input `x`.
pub fn prelu_backward<T: Real>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    state: &PReLUState<T>,
) -> Result<GradBundle<T>> {
    if grad_out.shape() != x.shape() {
        return Err(Error::shape(format!(
            "prelu backward grad {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let mut dslope = 0.0f64;
    let dx = grad_out.zip_map(x, |g, v| {
        if v > T::zero() {
            g
        } else {
            dslope += (g * v).as_f64();
            g * state.slope
        }
    })?;
    let mut bundle = GradBundle::with_input(dx);
    bundle.insert(ParamKind::PReluSlope, Tensor::from_vec(&[1], vec![T::of(dslope)])?);
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{central_diff, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nonnegative_input_is_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5);
        assert_eq!(prelu_forward(&x, &PReLUState::default()), x);
    }

    #[test]
    fn unit_slope_is_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 - 3.0);
        assert_eq!(prelu_forward(&x, &PReLUState { slope: 1.0 }), x);
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let x = Tensor::<f64>::normal(&[4, 5], 0.0, 1.0, &mut rng);
            let st = PReLUState {
                slope: Tensor::<f64>::uniform(&[1], -1.0, 1.0, &mut rng).data()[0],
            };
            let c = Tensor::<f64>::normal(&[4, 5], 0.0, 1.0, &mut rng);
            let loss = |x: &Tensor<f64>, st: &PReLUState<f64>| {
                let y = prelu_forward(x, st);
                y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let g = prelu_backward(&c, &x, &st).unwrap();
            for i in 0..x.len() {
                let fd = central_diff(|h| {
                    let mut xp = x.clone();
                    xp.data_mut()[i] += h;
                    loss(&xp, &st)
                });
                assert!(rel_err(g.input.as_ref().unwrap().data()[i], fd) < 1e-6);
            }
            let fd = central_diff(|h| loss(&x, &PReLUState { slope: st.slope + h }));
            assert!(rel_err(g.param(ParamKind::PReluSlope).unwrap().data()[0], fd) < 1e-6);
        }
    }
}
