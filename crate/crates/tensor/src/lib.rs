//! Dense tensors and the differentiable layer primitives an attention U-Net
//! is assembled from.
//!
//! Every layer is a pure function pair: a forward call returning its output
//! together with a saved context, and a backward call mapping that context
//! and an output gradient to input and parameter gradients. The layers are
//! generic over [`Scalar`], so the `f32` model code can be replayed in `f64`
//! for finite-difference checks.

pub mod activation;
pub mod conv;
mod error;
pub mod gradcheck;
pub mod norm;
pub mod pool;
mod scalar;
mod tensor;

pub use activation::{
    concat_channels, relu, relu_backward, scale_by_map, scale_by_map_backward, sigmoid, sigmoid_backward,
    split_channels,
};
pub use conv::{
    conv2d_backward, conv2d_forward, conv_output_extent, transposed_conv2d_backward, transposed_conv2d_forward,
    Conv2dCtx, TransposedConv2dCtx,
};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, Differentiable, FnLayer, GradCheckConfig, GradCheckReport};
pub use norm::{
    batchnorm2d_backward, batchnorm2d_forward, BatchNormConfig, BatchNormCtx, BatchNormOutput, BatchNormParams,
    Mode,
};
pub use pool::{maxpool2d, maxpool2d_backward, upsample2x, upsample2x_backward, PoolIndices};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Gradients produced by a layer's backward pass.
#[derive(Debug, Clone)]
pub struct LayerGrads<T = f32> {
    pub input_grad: Tensor<T>,
    /// Parameter gradients keyed by parameter role (`"weight"`, `"bias"`,
    /// `"gamma"`, `"beta"`), each shaped like its parameter.
    pub param_grads: Vec<(&'static str, Tensor<T>)>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_grads.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor<T>> {
        let pos = self.param_grads.iter().position(|(n, _)| *n == name)?;
        Some(self.param_grads.swap_remove(pos).1)
    }
}
