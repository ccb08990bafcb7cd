//! Differentiable primitive operations on [`crate::tensor::Tensor`].

mod elementwise;
mod linalg;
mod norm;
mod pool;
mod shape;

pub use elementwise::{
    abs, add, add_scalar, div, exp, gelu, ln_clamped, mean_all, mul, neg, relu, scale, sigmoid,
    silu, sub, sum_all,
};
pub(crate) use elementwise::{silu_deriv, silu_scalar};
pub use linalg::{matmul, softmax_along, transpose2d};
pub(crate) use linalg::{gemm, gemm_nt, gemm_tn};
pub use norm::{batchnorm, layernorm, BnState};
pub use pool::{add_channels, adaptive_avg_pool_to_1, avg_pool2x2, scale_channels, upsample_nearest2};
pub use shape::{concat0, concat_cols, gather_fixed, reshape, slice0, slice_cols};
