//! Dense tensors and a reverse-mode tape sufficient for small residual
//! convolutional networks.

mod array;
pub mod conv;
mod param;
mod scalar;
mod tape;

pub use array::Tensor;
pub use conv::{conv2d_direct, Conv2dConfig, ConvGeometry};
pub use param::{Buffer, Parameter};
pub use scalar::{gemm, Layout, Precision, Scalar};
pub use tape::{BatchStats, Gradients, LeafGrad, Mode, OpKind, Tape, Var, BN_EPS};
