//! Central finite differences, the independent oracle for [`Tape::backward`].
//!
//! [`Tape::backward`]: super::Tape::backward

use super::Tensor;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely.
///
/// Central differences at `FD_STEP` carry roughly `2e-16 · |f| / FD_STEP`
/// of cancellation noise, about `1e-10` for a cross-entropy near `ln 258`.
/// The floor keeps that noise an order of magnitude under [`GRAD_TOL`].
pub const GRAD_FLOOR: f64 = 1e-5;

/// Largest relative error accepted between tape and finite-difference gradients.
pub const GRAD_TOL: f64 = 1e-4;

/// `g[i] = (f(x + h·e_i) − f(x − h·e_i)) / (2h)`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as input")
}

/// `|a − b| / max(|a|, |b|, GRAD_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| relative_error(*x, *y))
        .fold(0.0, f64::max)
}
