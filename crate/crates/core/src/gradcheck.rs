//! Central finite differences for verifying analytic gradients.

use crate::tensor::Matrix;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn central_difference(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        out.data[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Largest violation of `|a - n| <= rtol * max(|a|, |n|) + atol`, reported
/// as `(index, analytic, numeric)`; `None` when every entry passes.
pub fn first_mismatch(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> Option<(usize, f64, f64)> {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .find(|(_, (a, n))| (*a - *n).abs() > rtol * a.abs().max(n.abs()) + atol)
        .map(|(i, (a, n))| (i, *a, *n))
}

/// Panics with a readable message when gradients disagree.
pub fn assert_close(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) {
    if let Some((i, a, n)) = first_mismatch(analytic, numeric, rtol, atol) {
        panic!("gradient mismatch at {i}: analytic {a:e} vs numeric {n:e}");
    }
}
