//! Batch normalization over `[batch x channels x ...]` tensors.
//!
//! Statistics are per channel, reduced over the batch axis and any trailing
//! spatial axes, so the same kernel serves both the convolution stack and the
//! 2-D fusion input.

use super::{Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Statistics captured by the forward pass and consumed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub mode: Mode,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    /// Weight of the old value in the running-statistics moving average.
    pub momentum: f64,
    pub cache: Option<BnCache>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            gamma: Param::new(Tensor::filled(&[channels], 1.0), true),
            beta: Param::new(Tensor::zeros(&[channels]), false),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            epsilon: BN_EPS,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn zero_grad(&mut self) {
        self.gamma.zero_grad();
        self.beta.zero_grad();
    }
}

/// Returns `(batch, channels, spatial)`.
fn layout(x: &Tensor, s: &BnState) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::shape("batchnorm needs at least [batch x channels]"));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    if c != s.channels() {
        return Err(Error::shape(format!(
            "batchnorm input has {} channels, state has {}",
            c,
            s.channels()
        )));
    }
    Ok((n, c, x.shape()[2..].iter().product()))
}

pub fn batchnorm_forward(x: &Tensor, s: &mut BnState, mode: Mode) -> Result<Tensor> {
    let (n, c, sp) = layout(x, s)?;
    let xd = x.data();
    let m = n * sp;
    let (mean, inv_std) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::invalid("batchnorm in train mode needs a batch of at least 2"));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    sum += xd[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter().sum::<f64>();
                }
                let mu = sum / m as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    for v in &xd[(b * c + ch) * sp..(b * c + ch + 1) * sp] {
                        sq += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / m as f64;
            }
            let mom = s.momentum;
            for ch in 0..c {
                let rm = &mut s.running_mean.data_mut()[ch];
                *rm = mom * *rm + (1.0 - mom) * mean[ch];
                let rv = &mut s.running_var.data_mut()[ch];
                *rv = mom * *rv + (1.0 - mom) * var[ch];
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + s.epsilon).sqrt()).collect();
            (mean, inv_std)
        }
        Mode::Eval => (
            s.running_mean.data().to_vec(),
            s.running_var
                .data()
                .iter()
                .map(|v| 1.0 / (v + s.epsilon).sqrt())
                .collect(),
        ),
    };

    let gamma = s.gamma.value.data();
    let beta = s.beta.value.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * sp..(b * c + ch + 1) * sp;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (o, v) in out[range.clone()].iter_mut().zip(&xd[range]) {
                *o = (v - mu) * is * g + bt;
            }
        }
    }
    s.cache = Some(BnCache { mode, mean, inv_std });
    Tensor::new(x.shape(), out)
}

/// Gradient of the normalize-scale-shift map; accumulates into gamma/beta grads.
///
/// After an eval-mode forward the statistics are constants and the map is affine.
pub fn batchnorm_backward(x: &Tensor, s: &mut BnState, grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, sp) = layout(x, s)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("batchnorm grad_out shape differs from input"));
    }
    let cache = s
        .cache
        .as_ref()
        .ok_or_else(|| Error::invalid("batchnorm backward called without a forward cache"))?;
    let xd = x.data();
    let gd = grad_out.data();
    let m = (n * sp) as f64;
    let mut grad_in = vec![0.0; x.len()];
    for ch in 0..c {
        let (mu, is) = (cache.mean[ch], cache.inv_std[ch]);
        let g = s.gamma.value.data()[ch];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
            for (v, dy) in xd[r.clone()].iter().zip(&gd[r]) {
                sum_dy += dy;
                sum_dy_xhat += dy * (v - mu) * is;
            }
        }
        s.gamma.grad.data_mut()[ch] += sum_dy_xhat;
        s.beta.grad.data_mut()[ch] += sum_dy;
        for b in 0..n {
            let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
            for ((gi, v), dy) in grad_in[r.clone()].iter_mut().zip(&xd[r.clone()]).zip(&gd[r]) {
                *gi = match cache.mode {
                    Mode::Train => {
                        let xhat = (v - mu) * is;
                        g * is * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                    }
                    Mode::Eval => g * is * dy,
                };
            }
        }
    }
    Tensor::new(x.shape(), grad_in)
}
