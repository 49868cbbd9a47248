//! Forward and backward kernels for every differentiable operation.
//!
//! Each op exposes a plain-function forward and backward; the tape in
//! [`crate::tape`] strings them together. Keeping the kernels free of tape
//! bookkeeping makes them testable against brute-force oracles in isolation.

pub mod conv;
pub mod correlate;
pub mod elementwise;
pub mod loss;
pub mod resample;
pub mod warp;

pub use conv::{conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, ConvGrads, ConvSpec};
pub use correlate::{correlate_backward, correlate_forward, CorrSpec};
pub use elementwise::{
    add_forward, concat_channels_backward, concat_channels_forward, leaky_relu_backward,
    leaky_relu_forward, scale_forward, sub_forward,
};
pub use loss::{norm_loss_backward, norm_loss_forward, NormKind};
pub use resample::{avg_pool2x, upsample2x_backward, upsample2x_forward};
pub use warp::{warp_backward, warp_forward, WarpGrads};
