//! Leaf layers. Each exposes `eval` (no caching, `&self`), `forward_train`
//! (caches what `backward` needs) and `backward`.

mod conv;
mod linear;
mod misc;
mod norm;
mod pool;

pub use conv::Conv2d;
pub use linear::Linear;
pub use misc::{Dropout, Flatten, Relu};
pub use norm::BatchNorm2d;
pub use pool::{AdaptiveAvgPool2d, AvgPool2d, MaxPool2d};

use crate::error::Error;

pub(crate) fn shape_err(
    layer: &'static str,
    expected: impl Into<String>,
    got: [usize; 4],
) -> Error {
    Error::Shape {
        layer,
        expected: expected.into(),
        got: format!("{got:?}"),
    }
}

/// Output extent of a sliding window (floor mode).
pub(crate) fn window_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}
