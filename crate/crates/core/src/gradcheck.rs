//! Central finite differences, used to validate analytic gradients.

/// Relative error with an absolute floor, so coordinates whose true gradient
/// is near zero are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for each coordinate
/// in `coords`.
pub fn central_differences<F>(x: &[f64], coords: &[usize], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compare `analytic[i]` against central differences for every `i` in `coords`.
pub fn check<F>(x: &[f64], analytic: &[f64], coords: &[usize], step: f64, floor: f64, f: F) -> Vec<GradCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = central_differences(x, coords, step, f);
    coords
        .iter()
        .zip(numeric)
        .map(|(&i, n)| GradCheck {
            coordinate: i,
            analytic: analytic[i],
            numeric: n,
            rel_error: relative_error(analytic[i], n, floor),
        })
        .collect()
}

pub fn max_rel_error(results: &[GradCheck]) -> f64 {
    results.iter().map(|r| r.rel_error).fold(0.0, f64::max)
}
