//! Central finite-difference gradient checking.

/// Relative error with a small floor on the denominator, so that two
/// gradients that are both essentially zero compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `point`.
pub fn numeric_gradient(point: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Five-point central stencil, `O(h⁴)` truncation error. Use for
/// gradients small enough that two-point round-off dominates.
pub fn numeric_gradient_five_point(point: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            let mut at = |k: f64| {
                x[i] = orig + k * step;
                f(&x)
            };
            let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
            x[i] = orig;
            (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step)
        })
        .collect()
}

/// Compares an analytic gradient against central differences.
pub fn check_gradient(point: &[f64], analytic: &[f64], step: f64, f: impl FnMut(&[f64]) -> f64) -> GradCheckReport {
    compare_gradients(analytic, &numeric_gradient(point, step, f))
}

/// As [`check_gradient`] with the five-point stencil.
pub fn check_gradient_five_point(point: &[f64], analytic: &[f64], step: f64, f: impl FnMut(&[f64]) -> f64) -> GradCheckReport {
    compare_gradients(analytic, &numeric_gradient_five_point(point, step, f))
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    assert_eq!(numeric.len(), analytic.len(), "gradient length mismatch");
    let mut report = GradCheckReport {
        checked: analytic.len(),
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: analytic.first().copied().unwrap_or(0.0),
        worst_numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = n;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[1] * v[0];
        let r = check_gradient(&[2.0, -1.0], &[1.0, 6.0], 1e-5, f);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let r = check_gradient(&[2.0, -1.0], &[1.0, 7.0], 1e-5, f);
        assert_eq!(r.worst_index, 1);
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        let f = |v: &[f64]| v[0].powi(4) - 2.0 * v[0].powi(3);
        let g = numeric_gradient_five_point(&[1.5], 0.1, f);
        let exact = 4.0 * 1.5f64.powi(3) - 6.0 * 1.5 * 1.5;
        assert!((g[0] - exact).abs() < 1e-10);
    }
}
