use serde::Serialize;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero compare on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub rel_tol: f64,
    pub passed: bool,
}

/// Compares the analytic gradient returned by `f` at `params` against central
/// finite differences with step `1e-4 * max(1, |w|)` per coordinate.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn grad_check<F>(mut f: F, params: &[f64], rel_tol: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        rel_tol,
        passed: true,
    };
    for i in 0..params.len() {
        let w = params[i];
        let h = 1e-4 * w.abs().max(1.0);
        probe[i] = w + h;
        let (plus, _) = f(&probe);
        probe[i] = w - h;
        let (minus, _) = f(&probe);
        probe[i] = w;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_error < rel_tol;
    report
}
