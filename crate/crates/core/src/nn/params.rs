use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// A trainable tensor together with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    /// Whether weight decay applies (weights and BN gamma, not biases or beta).
    pub decay: bool,
}

impl Param {
    pub fn new(value: Tensor, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            momentum,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Weight and bias of a fully connected or convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Param,
    pub bias: Param,
}

impl LayerParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Self {
        LayerParams {
            weights: Param::new(weights, true),
            bias: Param::new(bias, false),
        }
    }

    pub fn zeros(weight_shape: &[usize], bias_len: usize) -> Self {
        LayerParams::new(Tensor::zeros(weight_shape), Tensor::zeros(&[bias_len]))
    }

    /// He (Kaiming) normal init: weights ~ N(0, 2 / fan_in), zero bias.
    pub fn he_normal<R: Rng + ?Sized>(weight_shape: &[usize], bias_len: usize, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = Tensor::from_fn(weight_shape, |_| normal.sample(rng));
        LayerParams::new(w, Tensor::zeros(&[bias_len]))
    }

    pub fn grad_weights(&self) -> &Tensor {
        &self.weights.grad
    }

    pub fn grad_bias(&self) -> &Tensor {
        &self.bias.grad
    }

    pub fn zero_grad(&mut self) {
        self.weights.zero_grad();
        self.bias.zero_grad();
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}
