//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor).

pub mod conv;
mod gemm;
mod gradcheck;
pub mod ops;
mod tape;

pub use conv::{
    batch_norm_train, channel_affine, conv2d, conv_output_hw, depthwise_conv2d, global_avg_pool,
    maxpool2d, upsample_nn, BatchStats, Padding,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{concat_channels, mean_of, sigmoid, slice_channels};
pub use tape::{BackwardFn, Tape, Var};
