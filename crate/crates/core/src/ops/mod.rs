//! Forward and backward kernels.

mod conv;
mod elementwise;
mod pool;

pub use conv::{conv3d, conv3d_backward, conv_transpose3d, conv_transpose3d_backward, ConvGeom, ConvGrads};
pub use elementwise::{
    add, concat_channels, concat_channels_backward, relu, relu_backward, softmax_channels,
    softmax_channels_backward,
};
pub use pool::{maxpool3d, maxpool3d_backward, Pooled};
