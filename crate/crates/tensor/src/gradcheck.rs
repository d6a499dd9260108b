//! Central finite-difference checks for analytic gradients.

use crate::real::Real;
use crate::tensor::Tensor;

/// Relative error with a denominator floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst entry found by [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// `indices` selects which entries to perturb; `None` checks all of them.
pub fn finite_diff_check<T: Real>(
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    eps: f64,
    indices: Option<&[usize]>,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> GradCheckReport {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape must match the input");
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut probe = x.clone();
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::lit(eps);
        let plus = f(&probe);
        probe.data_mut()[i] = orig - T::lit(eps);
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i].to_f64().unwrap_or(f64::NAN);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err || err.is_nan() {
            report = GradCheckReport { max_rel_err: err, worst_index: i, analytic: a, numeric, checked: report.checked };
        }
    }
    report
}
