//! Central finite-difference verification of reverse-mode gradients.

use super::tensor::Tensor;

/// Perturbs every coordinate of every parameter block by `±step`, compares
/// the central difference `(f(p+h)-f(p-h))/2h` against the supplied
/// reverse-mode gradient, and returns the worst relative error with
/// denominator `max(|analytic|, |numeric|, 1e-8)`. Parameters are restored
/// bit-exactly before returning.
pub fn gradient_check(
    params: &mut [Tensor],
    analytic: &[Tensor],
    step: f64,
    mut eval: impl FnMut(&[Tensor]) -> f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter block");
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        assert_eq!(params[p].shape(), analytic[p].shape());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + step;
            let fp = eval(params);
            params[p].data_mut()[i] = orig - step;
            let fm = eval(params);
            params[p].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[p].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
