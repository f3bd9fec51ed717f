//! Differentiable layer kernels with hand-written backward passes.

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod loss;
mod params;

#[cfg(test)]
pub(crate) mod fd;

pub use activation::{dropout_backward, dropout_forward, relu, relu_backward};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, BnState};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_extent, ConvGeometry};
pub use linear::{dense_fc_backward, dense_fc_forward, dense_fc_param_grad};
pub use loss::{sigmoid, sigmoid_logloss, softmax_cross_entropy};
pub use params::{LayerParams, Param};

/// Whether layers run with batch statistics and stochastic masks, or deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}
