use super::{Element, Tensor};

/// Central-difference gradient of a scalar function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_difference_grad<E: Element>(
    mut f: impl FnMut(&Tensor<E>) -> E,
    x: &Tensor<E>,
    h: f64,
) -> Tensor<E> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.detached();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = E::of(orig.f64() + h);
        let up = f(&probe).f64();
        probe.data_mut()[i] = E::of(orig.f64() - h);
        let down = f(&probe).f64();
        probe.data_mut()[i] = orig;
        out.push(E::of((up - down) / (2.0 * h)));
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Worst elementwise disagreement between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradError {
    /// Largest relative error among elements judged relatively.
    pub max_rel: f64,
    /// Largest absolute error among elements whose analytic value is below the floor.
    pub max_abs_small: f64,
    pub checked: usize,
}

impl GradError {
    pub fn within(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel <= rel_tol && self.max_abs_small <= abs_tol
    }
}

/// Compare gradients elementwise. Elements with `|analytic| < floor` are
/// judged by absolute error, the rest by `|a − n| / max(|a|, |n|)`.
pub fn max_gradient_error(analytic: &[f64], numeric: &[f64], floor: f64) -> GradError {
    assert_eq!(analytic.len(), numeric.len());
    let mut e = GradError {
        max_rel: 0.0,
        max_abs_small: 0.0,
        checked: analytic.len(),
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        if a.abs() < floor {
            e.max_abs_small = e.max_abs_small.max(diff);
        } else {
            e.max_rel = e.max_rel.max(diff / a.abs().max(n.abs()));
        }
    }
    e
}
