//! 1-bit point-cloud classification: packed XNOR/popcount kernels, binary fully-connected
//! layers with learnable scales, and a mixture-model regularizer that pushes latent weights
//! toward two modes.

pub mod binlayer;
pub mod bitops;
pub mod checkpoint;
pub mod data;
pub mod em;
pub mod error;
pub mod model;
pub mod nn;
mod real;
mod serde_bits;
pub mod train;

pub use binlayer::{BiFCLayer, GradVariant, LayerForwardCache, SteConfig};
pub use bitops::{pack, unpack, xnor_popcount_matmul, IntMatrix, PackedBitMatrix};
pub use checkpoint::Checkpoint;
pub use data::{Dataset, PointCloud, Primitive, TriMesh};
pub use em::GmmChannelState;
pub use error::{Error, Result};
pub use model::{InferencePath, Model, ModelSpec};
pub use nn::{Mode, Tensor};
pub use real::Real;
pub use train::{EmSign, TrainConfig, TrainReport};
