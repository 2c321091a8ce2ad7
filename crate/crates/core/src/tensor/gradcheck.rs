/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate that produced `max_rel_error`.
    pub worst: Option<usize>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_pair: (f64, f64),
    pub checked: usize,
    pub skipped: usize,
}

/// Stabilizer in the relative-error denominator.
const DENOM_EPS: f64 = 1e-8;
/// Share of the largest analytic component added to every denominator, so
/// components far below the gradient's scale are not judged on rounding noise.
const SCALE_FLOOR: f64 = 1e-6;
/// Coordinates where both gradients are below this magnitude are skipped.
const DEGENERATE: f64 = 1e-12;

/// Compares the analytic gradient of `f` at `point` with the five-point
/// central difference `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
///
/// `f` returns `(value, gradient)`. The error per coordinate is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-6·max|analytic| + 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], step: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length must match point");
    let floor = SCALE_FLOOR * analytic.iter().fold(0.0_f64, |m, g| m.max(g.abs())) + DENOM_EPS;
    let mut probe = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        checked: 0,
        skipped: 0,
    };
    for i in 0..point.len() {
        let mut eval = |offset: f64| {
            probe[i] = point[i] + offset;
            let v = f(&probe).0;
            probe[i] = point[i];
            v
        };
        let (up2, up, down, down2) = (eval(2.0 * step), eval(step), eval(-step), eval(-2.0 * step));
        let central = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
        let a = analytic[i];
        if a.abs() < DEGENERATE && central.abs() < DEGENERATE {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let err = (a - central).abs() / (a.abs() + central.abs() + floor);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some(i);
            report.worst_pair = (a, central);
        }
    }
    report
}
