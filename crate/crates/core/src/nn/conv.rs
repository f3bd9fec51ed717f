//! 2-D convolution (cross-correlation, no kernel flip) via per-image im2col.

use super::LayerParams;
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeometry { stride, pad }
    }
}

/// `floor((extent + 2 pad - kernel) / stride) + 1`, or an error when the kernel
/// does not fit the padded input.
pub fn conv_output_extent(extent: usize, kernel: usize, geom: ConvGeometry) -> Result<usize> {
    if geom.stride == 0 {
        return Err(Error::invalid("conv stride must be positive"));
    }
    let padded = extent + 2 * geom.pad;
    if kernel == 0 || padded < kernel {
        return Err(Error::shape(format!(
            "kernel {} does not fit padded extent {}",
            kernel, padded
        )));
    }
    Ok((padded - kernel) / geom.stride + 1)
}

struct Dims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Dims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn dims(x: &Tensor, p: &LayerParams, geom: ConvGeometry) -> Result<Dims> {
    let (batch, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = p.weights.value.dims4()?;
    if cin != wcin {
        return Err(Error::shape(format!(
            "conv input has {} channels, kernel expects {}",
            cin, wcin
        )));
    }
    if p.bias.value.len() != cout {
        return Err(Error::shape("conv bias length != output channels"));
    }
    let oh = conv_output_extent(h, kh, geom)?;
    let ow = conv_output_extent(w, kw, geom)?;
    Ok(Dims {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

fn im2col(img: &[f64], d: &Dims, geom: ConvGeometry, cols: &mut [f64]) {
    let p = d.p();
    let pad = geom.pad as isize;
    for c in 0..d.cin {
        let plane = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ki) as isize - pad;
                    let line = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &Dims, geom: ConvGeometry, img: &mut [f64]) {
    let p = d.p();
    let pad = geom.pad as isize;
    for c in 0..d.cin {
        let plane = &mut img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ki) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = iy as usize * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * geom.stride + kj) as isize - pad;
                        if ix >= 0 && ix < d.w as isize {
                            plane[base + ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of `x[batch x cin x h x w]` with kernels `[cout x cin x kh x kw]`.
pub fn conv2d_forward(x: &Tensor, p: &LayerParams, geom: ConvGeometry) -> Result<Tensor> {
    let d = dims(x, p, geom)?;
    let (k, pp) = (d.k(), d.p());
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * pp;
    let mut out = vec![0.0; d.batch * out_len];
    let mut cols = vec![0.0; k * pp];
    for b in 0..d.batch {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &d, geom, &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (co, bias) in p.bias.value.data().iter().enumerate() {
            dst[co * pp..(co + 1) * pp].fill(*bias);
        }
        gemm_nn(d.cout, k, pp, p.weights.value.data(), &cols, dst);
    }
    Tensor::new(&[d.batch, d.cout, d.oh, d.ow], out)
}

/// Accumulates kernel and bias gradients and returns the input gradient.
pub fn conv2d_backward(x: &Tensor, p: &mut LayerParams, grad_out: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let d = dims(x, p, geom)?;
    if grad_out.shape() != [d.batch, d.cout, d.oh, d.ow] {
        return Err(Error::shape(format!(
            "conv grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [d.batch, d.cout, d.oh, d.ow]
        )));
    }
    let (k, pp) = (d.k(), d.p());
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * pp;
    let mut grad_in = vec![0.0; d.batch * in_len];
    let mut cols = vec![0.0; k * pp];
    let mut grad_cols = vec![0.0; k * pp];
    for b in 0..d.batch {
        let g = &grad_out.data()[b * out_len..(b + 1) * out_len];
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &d, geom, &mut cols);
        gemm_nt(d.cout, pp, k, g, &cols, p.weights.grad.data_mut());
        for (co, gb) in p.bias.grad.data_mut().iter_mut().enumerate() {
            *gb += g[co * pp..(co + 1) * pp].iter().sum::<f64>();
        }
        grad_cols.fill(0.0);
        gemm_tn(d.cout, k, pp, p.weights.value.data(), g, &mut grad_cols);
        col2im(&grad_cols, &d, geom, &mut grad_in[b * in_len..(b + 1) * in_len]);
    }
    Tensor::new(&[d.batch, d.cin, d.h, d.w], grad_in)
}
