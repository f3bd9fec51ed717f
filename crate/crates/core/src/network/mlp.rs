use rand::Rng;

use super::{ParamGroup, Slot};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_backward, batchnorm_forward, dense_fc_backward, dense_fc_forward, dropout_backward, dropout_forward,
    relu, relu_backward, BnState, LayerParams, Mode,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct MlpTrace {
    inputs: Vec<Tensor>,
    pre_relu: Vec<Tensor>,
    masks: Vec<Tensor>,
}

/// Fully connected stack: hidden layers are FC -> ReLU -> dropout, the last
/// layer is a plain FC.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LayerParams>,
    pub dropout_rate: f64,
    trace: Option<MlpTrace>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, dropout_rate: f64, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for &h in hidden.iter().chain(std::iter::once(&output)) {
            layers.push(LayerParams::he_normal(&[width, h], h, width, rng));
            width = h;
        }
        Mlp {
            layers,
            dropout_rate,
            trace: None,
        }
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut trace = MlpTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_relu: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
        };
        let mut h = x.clone();
        for (i, p) in self.layers.iter().enumerate() {
            let y = dense_fc_forward(&h, p)?;
            trace.inputs.push(h);
            if i == last {
                h = y;
            } else {
                let (d, mask) = dropout_forward(&relu(&y), self.dropout_rate, rng, mode)?;
                trace.pre_relu.push(y);
                trace.masks.push(mask);
                h = d;
            }
        }
        self.trace = Some(trace);
        Ok(h)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::invalid("fc stack backward without forward"))?;
        let last = self.layers.len() - 1;
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                g = dropout_backward(&trace.masks[i], &g)?;
                g = relu_backward(&trace.pre_relu[i], &g)?;
            }
            g = dense_fc_backward(&trace.inputs[i], &mut self.layers[i], &g)?;
        }
        Ok(g)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, Slot<'_>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(
                &format!("{}.{}.w", prefix, i),
                ParamGroup::Dense,
                Slot::Param(&mut l.weights),
            );
            f(
                &format!("{}.{}.b", prefix, i),
                ParamGroup::Dense,
                Slot::Param(&mut l.bias),
            );
        }
    }
}

/// Fusion layers: optional batch norm over the concatenated input, then the
/// FC stack down to one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Combnet {
    pub bn: Option<BnState>,
    pub mlp: Mlp,
    bn_input: Option<Tensor>,
}

impl Combnet {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], dropout_rate: f64, use_bn: bool, rng: &mut R) -> Self {
        Combnet {
            bn: use_bn.then(|| BnState::new(input)),
            mlp: Mlp::new(input, hidden, 1, dropout_rate, rng),
            bn_input: None,
        }
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let h = match &mut self.bn {
            Some(bn) => {
                let y = batchnorm_forward(x, bn, mode)?;
                self.bn_input = Some(x.clone());
                y
            }
            None => x.clone(),
        };
        self.mlp.forward(&h, mode, rng)
    }

    pub fn backward(&mut self, grad_z: &Tensor) -> Result<Tensor> {
        let g = self.mlp.backward(grad_z)?;
        match &mut self.bn {
            Some(bn) => {
                let x = self
                    .bn_input
                    .take()
                    .ok_or_else(|| Error::invalid("fusion backward without forward"))?;
                batchnorm_backward(&x, bn, &g)
            }
            None => Ok(g),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, Slot<'_>)) {
        if let Some(bn) = &mut self.bn {
            f(
                &format!("{}.bn.gamma", prefix),
                ParamGroup::Dense,
                Slot::Param(&mut bn.gamma),
            );
            f(
                &format!("{}.bn.beta", prefix),
                ParamGroup::Dense,
                Slot::Param(&mut bn.beta),
            );
            f(
                &format!("{}.bn.mean", prefix),
                ParamGroup::Dense,
                Slot::Buffer(&mut bn.running_mean),
            );
            f(
                &format!("{}.bn.var", prefix),
                ParamGroup::Dense,
                Slot::Buffer(&mut bn.running_var),
            );
        }
        self.mlp.visit(&format!("{}.fc", prefix), f);
    }
}
