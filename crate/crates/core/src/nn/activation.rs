use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes the gradient where `x > 0`; the subgradient at exactly zero is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape("relu grad_out shape differs from input"));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (`0` for dropped elements, `1 / (1 - rate)` for survivors).
pub fn dropout_forward<R: Rng + ?Sized>(x: &Tensor, rate: f64, rng: &mut R, mode: Mode) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {} not in [0, 1)", rate)));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), Tensor::filled(x.shape(), 1.0)));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(x.shape(), |_| if rng.random::<f64>() < rate { 0.0 } else { keep });
    let out = x.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect();
    Ok((Tensor::new(x.shape(), out)?, mask))
}

pub fn dropout_backward(mask: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if mask.shape() != grad_out.shape() {
        return Err(Error::shape("dropout mask shape differs from grad_out"));
    }
    let data = mask.data().iter().zip(grad_out.data()).map(|(m, g)| m * g).collect();
    Tensor::new(mask.shape(), data)
}
