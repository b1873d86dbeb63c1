//! Dense tensors and the manually differentiated primitives of the network pipeline.

mod batchnorm;
mod grad;
mod linear;
mod loss;
mod optim;
mod pool;
mod prelu;
mod tensor;
#[cfg(test)]
pub(crate) mod testing;

use serde::{Deserialize, Serialize};

pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormState, BnCache, EvalCoeffs};
pub use grad::{GradBundle, ParamKind};
pub use linear::{linear_backward, linear_forward};
pub use loss::softmax_cross_entropy;
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamMoments};
pub use pool::{maxpool_points_backward, maxpool_points_forward};
pub use prelu::{prelu_backward, prelu_forward, PReLUState, SLOPE_FLOOR};
pub use tensor::Tensor;

/// Batch-norm behaviour: batch statistics (`Train`) or running statistics (`Eval`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}
