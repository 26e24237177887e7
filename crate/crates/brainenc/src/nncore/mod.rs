//! Dense-tensor algebra with reverse-mode differentiation, the shared
//! neural layers, and the numeric-precision policy.

mod conv;
mod gemm;
mod ops;
mod tape;
mod tensor;

pub mod attention;
pub mod layers;
pub mod precision;

pub use attention::{
    axial_forward, causal_mask, full_mask, AttnOpts, Axis3, AxialBlock, MultiHeadAttention,
};
pub use layers::{
    make_dropout_mask, normal_f64, normal_param, zeros_param, Conv3d, ConvT3d, LayerNorm,
    Linear, PosEmb3d,
};
pub use precision::{PrecisionMode, PrecisionPolicy};
pub use tape::{grad, grad_or_zero};
pub use tensor::Tensor;
