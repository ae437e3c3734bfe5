//! Deterministic dense-tensor kernels with hand-written gradients.
//!
//! Every forward op used by the model has a matching `*_backward`; the
//! gradients are verified against central differences by
//! [`finite_diff_check`].

mod activation;
mod batchnorm;
mod conv;
mod gemm;
mod gradcheck;
mod image;
pub mod io;
mod layout;
mod linear;
mod optim;
mod tensor;

pub use activation::{
    gelu, gelu_backward, gelu_scalar, relu, relu_backward, sign_signature, softmax_channel, softmax_channel_backward,
};
pub use batchnorm::{batchnorm2d, batchnorm2d_backward, update_running_stats, BnCache, BnMode, BN_MOMENTUM};
pub use conv::{add_channel_bias, channel_sum, conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, Probe};
pub use image::{
    bilinear_resize, bilinear_resize_backward, bilinear_resize_centered, gaussian_blur, gaussian_kernel, resize_nhwc,
    resize_nhwc_backward,
};
pub use layout::{concat_channels, nchw_to_nhwc, nhwc_to_nchw, split_channels};
pub use linear::{affine, affine_backward, AffineGrads};
pub use optim::{adam_step, lr_at, Adam, AdamState, ParamTensor, Parameterized};
pub use tensor::Tensor;
