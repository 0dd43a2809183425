//! Central finite differences: the independent oracle the autodiff tape is
//! checked against.

use super::Tensor;

/// Central-difference gradient (f(x+h·e_i) − f(x−h·e_i)) / 2h per coordinate.
/// `f` must be deterministic.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff_grad: h must be positive");
    let mut grad = Tensor::zeros(x.shape.clone());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max entry deviation between two same-shaped tensors, normalized by the
/// larger of the two max-abs magnitudes (floored to avoid 0/0).
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape, "max_rel_err: shape mismatch");
    let scale = a.max_abs().max(b.max_abs()).max(1e-12);
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}
