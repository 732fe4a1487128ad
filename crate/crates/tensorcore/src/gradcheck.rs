//! Central finite-difference checks against [`crate::Tape::backward`].
//!
//! The checks only evaluate forward passes, so they are independent of the
//! backward formulas they verify. Run them in `f64`: at a step of `1e-3` the
//! rounding noise of `f32` forwards swamps the truncation error.

use crate::element::Element;
use crate::tensor::Tensor;

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, with `floor` guarding
/// the denominator for (near-)zero gradients.
pub fn relative_error<T: Element>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    let mut diff = 0.0;
    let (mut na, mut nn) = (0.0, 0.0);
    for (&a, &n) in analytic.iter().zip(numeric) {
        let (a, n) = (a.as_f64(), n.as_f64());
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor)
}

/// Central differences of the scalar function `f` at `x`.
pub fn numeric_gradient<T: Element>(
    x: &Tensor<T>,
    step: f64,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> Vec<T> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = T::of(orig.as_f64() + step);
            let up = f(&probe);
            probe.data_mut()[i] = T::of(orig.as_f64() - step);
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            T::of((up - down) / (2.0 * step))
        })
        .collect()
}
