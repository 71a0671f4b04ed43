//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! Layout is row-major; binary ops broadcast numpy-style (trailing dimensions
//! aligned). Graphs are built eagerly on every op whose inputs require
//! gradients and consumed by [`Tensor::backward`].

mod broadcast;
pub mod checkpoint;
mod linalg;
mod norm;
pub mod ops;
mod params;
mod tensor;

pub use broadcast::broadcast_shape;
pub use linalg::{linear, matmul};
pub use norm::{batch_norm, NormState, BN_EPS, BN_MOMENTUM};
pub use ops::{
    add, broadcast_to, concat, cross_entropy, gather_rows, mean_all, mul, reduce_max, reduce_mean,
    reduce_sum, relu, reshape, scale, sigmoid, softmax, sub, sum_all, transpose_last,
};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::Tensor;
