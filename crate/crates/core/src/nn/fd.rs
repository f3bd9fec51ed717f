//! Central finite-difference oracle for unit tests.

use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Scalar projection `<y, proj>` used to turn a tensor output into a loss.
pub fn project(y: &Tensor, proj: &Tensor) -> f64 {
    y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

pub fn numeric_grad(at: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut x = at.clone();
    let mut g = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + STEP;
        let up = f(&x);
        x.data_mut()[i] = orig - STEP;
        let down = f(&x);
        x.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * STEP);
    }
    g
}

/// Relative error with an absolute floor so near-zero coordinates do not blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-3))
}

pub fn assert_grad(analytic: &Tensor, at: &Tensor, f: impl Fn(&Tensor) -> f64, tol: f64) {
    let numeric = numeric_grad(at, f);
    assert_eq!(analytic.shape(), numeric.shape());
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = rel_err(*a, *n);
        assert!(
            e < tol,
            "coordinate {}: analytic {} vs numeric {} (rel err {:e})",
            i,
            a,
            n,
            e
        );
    }
}

/// Five-point (fourth-order) stencil; used where tolerances sit below the
/// rounding floor of the plain central difference.
pub fn numeric_grad_5pt(at: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let h = 1e-3;
    let mut x = at.clone();
    let mut g = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let orig = x.data()[i];
        let mut eval = |d: f64| {
            x.data_mut()[i] = orig + d;
            f(&x)
        };
        let (p2, p1, m1, m2) = (eval(2.0 * h), eval(h), eval(-h), eval(-2.0 * h));
        x.data_mut()[i] = orig;
        g.data_mut()[i] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
    }
    g
}

pub fn assert_grad_5pt(analytic: &Tensor, at: &Tensor, f: impl Fn(&Tensor) -> f64, tol: f64) {
    let numeric = numeric_grad_5pt(at, f);
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = rel_err(*a, *n);
        assert!(
            e < tol,
            "coordinate {}: analytic {} vs numeric {} (rel err {:e})",
            i,
            a,
            n,
            e
        );
    }
}
