//! Numerical gradient checking.
//!
//! Central finite differences over arbitrary scalar-valued functions of a
//! tensor. The closure is re-evaluated from scratch per probe, so it must be
//! deterministic.

use super::tensor::Tensor;

/// Central-difference gradient of `f` at `x`: (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - h;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * h);
    }
    grad
}

/// Like `numeric_gradient` but only for the listed flat coordinates; other
/// entries stay zero. Keeps full-model checks inside their time budget.
pub fn numeric_gradient_at(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Vec<(usize, f64)> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let hi = f(&probe);
            probe.data_mut()[i] = orig - h;
            let lo = f(&probe);
            probe.data_mut()[i] = orig;
            (i, (hi - lo) / (2.0 * h))
        })
        .collect()
}

/// Max over elements of |a−b| / max(|a|, |b|, floor). The floor keeps
/// near-zero gradients from inflating the relative error.
pub fn max_rel_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel error shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
