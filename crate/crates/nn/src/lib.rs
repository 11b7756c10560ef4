//! A small CPU-only toolkit for convolutional networks.
//!
//! Tensors are dense NCHW `f32` buffers. Layers are composed into a
//! [`Module`] tree whose parameter names follow the dotted-path
//! convention used by common model zoos (`layer1.0.conv1.weight`), so
//! externally exported weights can be loaded by name.
//!
//! Every reduction runs in a fixed order: for a given build, results are
//! bitwise reproducible regardless of the rayon thread count.

mod error;
mod gemm;
pub mod layers;
mod module;
pub mod optim;
mod tensor;

pub use error::{Error, Result};
pub use layers::{
    AdaptiveAvgPool2d, AvgPool2d, BatchNorm2d, Conv2d, Dropout, Flatten, Linear, MaxPool2d, Relu,
};
pub use module::{Buffer, Concat, DenseConcat, Module, Param, Residual, Sequential};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
