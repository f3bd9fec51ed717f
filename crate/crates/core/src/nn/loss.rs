use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy on logits plus `lambda * weight_sq_norm`.
///
/// Returns the loss and `d loss / d z = (sigmoid(z) - y) / N`.
pub fn sigmoid_logloss(z: &Tensor, y: &[f64], weight_sq_norm: f64, lambda: f64) -> Result<(f64, Tensor)> {
    let n = z.len();
    if n == 0 {
        return Err(Error::invalid("logloss over an empty batch"));
    }
    if y.len() != n {
        return Err(Error::shape(format!("{} logits vs {} labels", n, y.len())));
    }
    if let Some(bad) = y.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(Error::invalid(format!("label {} not in {{0, 1}}", bad)));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&zi, &yi) in z.data().iter().zip(y) {
        // -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
        loss += softplus(zi) - yi * zi;
        grad.push((sigmoid(zi) - yi) * inv_n);
    }
    let total = loss * inv_n + lambda * weight_sq_norm;
    Ok((total, Tensor::new(z.shape(), grad)?))
}

/// Mean softmax cross-entropy; returns the loss and `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = logits.dims2()?;
    if labels.len() != batch {
        return Err(Error::shape(format!("{} rows vs {} labels", batch, labels.len())));
    }
    if batch == 0 {
        return Err(Error::invalid("cross-entropy over an empty batch"));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(batch * classes);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                label, classes
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let t = if j == label { 1.0 } else { 0.0 };
            grad.push((p - t) / batch as f64);
        }
    }
    Ok((loss / batch as f64, Tensor::new(logits.shape(), grad)?))
}
