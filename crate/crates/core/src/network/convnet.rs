use rand::Rng;

use super::{ConvSpec, ParamGroup, Slot};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, relu, relu_backward, BnState, ConvGeometry,
    LayerParams, Mode,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub params: LayerParams,
    pub bn: BnState,
    pub geom: ConvGeometry,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvTrace {
    /// Input of each conv, output of each conv, output of each BN.
    inputs: Vec<Tensor>,
    pre_bn: Vec<Tensor>,
    pre_relu: Vec<Tensor>,
    last_shape: Vec<usize>,
}

/// Stack of conv -> BN -> ReLU layers followed by global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Convnet {
    pub layers: Vec<ConvLayer>,
    trace: Option<ConvTrace>,
}

impl Convnet {
    pub fn new<R: Rng + ?Sized>(spec: &ConvSpec, in_channels: usize, rng: &mut R) -> Self {
        let layers = spec
            .layer_shapes(in_channels)
            .into_iter()
            .map(|(cin, cout, k, geom)| ConvLayer {
                params: LayerParams::he_normal(&[cout, cin, k, k], cout, cin * k * k, rng),
                bn: BnState::new(cout),
                geom,
            })
            .collect();
        Convnet { layers, trace: None }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bn.channels())
    }

    /// `[n x c x h x w]` images to pooled `[n x channels]` features.
    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        if images.ndim() != 4 {
            return Err(Error::shape(format!(
                "convnet expects [n,c,h,w], got {:?}",
                images.shape()
            )));
        }
        let mut trace = ConvTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_bn: Vec::with_capacity(self.layers.len()),
            pre_relu: Vec::with_capacity(self.layers.len()),
            last_shape: Vec::new(),
        };
        let mut x = images.clone();
        for layer in &mut self.layers {
            let y = conv2d_forward(&x, &layer.params, layer.geom)?;
            let a = batchnorm_forward(&y, &mut layer.bn, mode)?;
            let next = relu(&a);
            trace.inputs.push(x);
            trace.pre_bn.push(y);
            trace.pre_relu.push(a);
            x = next;
        }
        trace.last_shape = x.shape().to_vec();
        let pooled = global_avg_pool(&x)?;
        self.trace = Some(trace);
        Ok(pooled)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the images.
    pub fn backward(&mut self, grad_pooled: &Tensor) -> Result<Tensor> {
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::invalid("convnet backward without forward"))?;
        let mut g = global_avg_pool_backward(grad_pooled, &trace.last_shape)?;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = relu_backward(&trace.pre_relu[i], &g)?;
            g = batchnorm_backward(&trace.pre_bn[i], &mut layer.bn, &g)?;
            g = conv2d_backward(&trace.inputs[i], &mut layer.params, &g, layer.geom)?;
        }
        Ok(g)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, Slot<'_>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("{}.{}", prefix, i);
            f(
                &format!("{}.w", p),
                ParamGroup::Conv,
                Slot::Param(&mut l.params.weights),
            );
            f(&format!("{}.b", p), ParamGroup::Conv, Slot::Param(&mut l.params.bias));
            f(
                &format!("{}.bn.gamma", p),
                ParamGroup::Conv,
                Slot::Param(&mut l.bn.gamma),
            );
            f(&format!("{}.bn.beta", p), ParamGroup::Conv, Slot::Param(&mut l.bn.beta));
            f(
                &format!("{}.bn.mean", p),
                ParamGroup::Conv,
                Slot::Buffer(&mut l.bn.running_mean),
            );
            f(
                &format!("{}.bn.var", p),
                ParamGroup::Conv,
                Slot::Buffer(&mut l.bn.running_var),
            );
        }
    }
}

/// Mean over all trailing axes: `[n x c x ...]` to `[n x c]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.ndim() < 2 {
        return Err(Error::shape("pooling needs [n x c x ...]"));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let sp: usize = x.shape()[2..].iter().product();
    let inv = 1.0 / sp as f64;
    let data = x.data().chunks(sp).map(|ch| ch.iter().sum::<f64>() * inv).collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward(grad: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.len() < 2 || grad.shape() != &shape[..2] {
        return Err(Error::shape(format!(
            "pool grad {:?} vs input {:?}",
            grad.shape(),
            shape
        )));
    }
    let sp: usize = shape[2..].iter().product();
    let inv = 1.0 / sp as f64;
    let mut data = Vec::with_capacity(grad.len() * sp);
    for &g in grad.data() {
        data.extend(std::iter::repeat_n(g * inv, sp));
    }
    Tensor::new(shape, data)
}
