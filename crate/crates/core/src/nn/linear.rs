use super::LayerParams;
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

fn check(x: &Tensor, p: &LayerParams) -> Result<(usize, usize, usize)> {
    let (batch, inp) = x.dims2()?;
    let (w_in, out) = p.weights.value.dims2()?;
    if inp != w_in {
        return Err(Error::shape(format!("fc input width {} vs weight rows {}", inp, w_in)));
    }
    if p.bias.value.len() != out {
        return Err(Error::shape(format!(
            "fc bias length {} vs {} outputs",
            p.bias.value.len(),
            out
        )));
    }
    Ok((batch, inp, out))
}

/// `x W + b`, with `W` stored as `[in x out]`.
pub fn dense_fc_forward(x: &Tensor, p: &LayerParams) -> Result<Tensor> {
    let (batch, inp, out) = check(x, p)?;
    let mut y = Vec::with_capacity(batch * out);
    for _ in 0..batch {
        y.extend_from_slice(p.bias.value.data());
    }
    gemm_nn(batch, inp, out, x.data(), p.weights.value.data(), &mut y);
    Tensor::new(&[batch, out], y)
}

/// Accumulates `xᵀ g` into the weight gradient and column sums of `g` into the
/// bias gradient, without the input gradient (for a layer fed by data).
pub fn dense_fc_param_grad(x: &Tensor, p: &mut LayerParams, grad_out: &Tensor) -> Result<()> {
    let (batch, inp, out) = check(x, p)?;
    if grad_out.shape() != [batch, out] {
        return Err(Error::shape(format!(
            "fc grad_out {:?}, expected [{}, {}]",
            grad_out.shape(),
            batch,
            out
        )));
    }
    gemm_tn(batch, inp, out, x.data(), grad_out.data(), p.weights.grad.data_mut());
    let gb = p.bias.grad.data_mut();
    for i in 0..batch {
        for (b, g) in gb.iter_mut().zip(grad_out.row(i)) {
            *b += g;
        }
    }
    Ok(())
}

/// [`dense_fc_param_grad`], then returns `g Wᵀ`.
pub fn dense_fc_backward(x: &Tensor, p: &mut LayerParams, grad_out: &Tensor) -> Result<Tensor> {
    dense_fc_param_grad(x, p, grad_out)?;
    let (batch, inp, out) = check(x, p)?;
    let mut grad_in = vec![0.0; batch * inp];
    gemm_nt(batch, out, inp, grad_out.data(), p.weights.value.data(), &mut grad_in);
    Tensor::new(&[batch, inp], grad_in)
}
