use super::Tensor;

/// Central finite-difference gradient of a scalar function at `t`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, t: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = t.clone();
    let mut grad = Tensor::zeros_like(t);
    for i in 0..t.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// turning rounding noise into a large ratio.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
