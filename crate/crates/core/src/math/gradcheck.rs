use crate::math::ParamSet;

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are compared on an absolute scale instead of dividing noise by
/// noise.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients against central differences for every entry
/// of every parameter.
///
/// `loss` evaluates the objective at the current parameter values and
/// accumulates its gradient into the parameters' `grad` fields. On return the
/// parameters hold their original values and the analytic gradient.
pub fn gradient_check<P, F>(params: &mut P, eps: f64, mut loss: F) -> GradCheckReport
where
    P: ParamSet + ?Sized,
    F: FnMut(&mut P) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    params.zero_grads();
    loss(params);
    let analytic: Vec<Vec<f64>> = params.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: 0,
    };

    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let original = params.params()[pi].value.data()[j];
            params.params_mut()[pi].value.data_mut()[j] = original + eps;
            let up = loss(params);
            params.params_mut()[pi].value.data_mut()[j] = original - eps;
            let down = loss(params);
            params.params_mut()[pi].value.data_mut()[j] = original;

            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.params()[pi].name.clone(), j));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }

    for (p, g) in params.params_mut().into_iter().zip(&analytic) {
        p.grad.data_mut().copy_from_slice(g);
    }
    report
}
