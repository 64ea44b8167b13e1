//! Minimal differentiable primitives with explicit forward/backward passes.
//!
//! Layers hold [`ParamId`]s into a [`ParamSet`]; forward passes return the
//! cache their backward pass needs, and backward passes accumulate into a
//! [`Grads`] aligned with the same set.

pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tensor;

pub use conv::{
    adaptive_avg_pool, adaptive_avg_pool_backward, concat_channels, conv_stack_forward, relu_map, split_channels, upsample_nearest,
    upsample_nearest_backward, Conv2d, ConvCache, ConvStack, ConvStackCache, LayerSpec, ResidualBlock,
};
pub use gradcheck::{grad_check, grad_check_with_reference, rel_error, GradCheckReport};
pub use layers::{
    broadcast_concat, broadcast_concat_backward, hconcat, hconcat_backward, max_over_rows, max_over_rows_backward, softmax_rows,
    softmax_rows_backward, BatchNorm, Ctx, Linear, MlpCache, SharedMlp,
};
pub use params::{param_count, Grads, ParamBuilder, ParamCount, ParamEntry, ParamId, ParamRole, ParamSet};
pub use tensor::Tensor;
