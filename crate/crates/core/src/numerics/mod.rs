//! Minimal dense-tensor and layer kit: forward evaluation, analytic backward
//! passes and finite-difference verification.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use attention::{softmax_in_place, CrossAttention, SpatialAttention};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{
    conv2d, conv2d_backward, default_groups, group_norm, group_norm_backward, leaky_relu_backward_slice,
    leaky_relu_slice, linear, linear_backward, sigmoid, silu, silu_backward, silu_backward_slice,
    silu_scalar, silu_slice, upsample_nearest2, upsample_nearest2_backward, Conv1d, Conv2d,
    Embedding, GroupNorm, Linear,
};
pub use optim::{Adam, AdamConfig, Module};
pub use tensor::{Parameter, Tensor};
