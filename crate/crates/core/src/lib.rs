//! Volumetric segmentation engine: tensors and 3-D kernels with analytic
//! backward passes, Tversky/BCE losses with adaptive fusion, UNet-3D models,
//! Adam, overlap metrics and volume I/O.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below fix the common choices.

pub mod data;
pub mod error;
pub mod field;
pub mod graph;
pub mod hash;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod unet;

pub use error::{DataError, ModelError, OptimError, TensorError};
pub use field::{BinaryField, SoftmaxField};
pub use graph::{NodeId, Op, OpGraph, ParamId, ParamStore};
pub use losses::{AdaptiveWeights, LossReport, TverskyParams};
pub use metrics::{ConfusionCounts, Metrics};
pub use optim::{AdamConfig, AdamState, LrSchedule};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{DownsampleMode, Model, ModelConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type SoftmaxField32 = SoftmaxField<f32>;
pub type SoftmaxField64 = SoftmaxField<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type AdamState32 = AdamState<f32>;
