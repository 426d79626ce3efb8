//! Central-difference gradient checking.
//!
//! The checker knows nothing about tapes: it perturbs raw `f64` tensors and
//! compares numeric slopes against whatever analytic gradients the caller
//! supplies. Stochastic pieces of the loss (dropout masks) must be re-seeded
//! inside the closure so every evaluation sees the same noise.

use super::Tensor;

/// Relative error between an analytic and a numeric derivative, with the
/// denominator floored at 1 so tiny gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1.0, analytic.abs() + numeric.abs())
}

/// Worst element found by [`max_rel_err`].
#[derive(Debug, Clone)]
pub struct WorstElement {
    pub input: usize,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Check every element of every input by central differences.
///
/// `loss_fn` must be a pure function of `inputs` (re-seed any RNG inside).
/// `grads` holds the analytic gradient for each input, shapes matching.
/// Returns the worst element; the caller asserts on its `rel_err`.
pub fn max_rel_err<F>(
    inputs: &[Tensor<f64>],
    grads: &[Tensor<f64>],
    mut loss_fn: F,
    step: f64,
) -> WorstElement
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    assert_eq!(inputs.len(), grads.len(), "one gradient per input");
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = WorstElement {
        input: 0,
        flat_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_err: 0.0,
    };
    for (ti, grad) in grads.iter().enumerate() {
        assert_eq!(
            inputs[ti].shape(),
            grad.shape(),
            "gradient {} shape mismatch",
            ti
        );
        for ei in 0..inputs[ti].len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let up = loss_fn(&work);
            work[ti].data_mut()[ei] = orig - step;
            let down = loss_fn(&work);
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grad.data()[ei];
            let err = rel_err(analytic, numeric);
            if err > worst.rel_err {
                worst = WorstElement {
                    input: ti,
                    flat_index: ei,
                    analytic,
                    numeric,
                    rel_err: err,
                };
            }
        }
    }
    worst
}
