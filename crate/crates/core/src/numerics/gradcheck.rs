//! Central finite-difference oracle for analytic gradients.

/// Reference setting: 64-bit evaluation with `eps = 1e-5`.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates probed at most; larger parameter vectors are subsampled
    /// on an even stride.
    pub max_coords: usize,
    /// Denominator floor of the relative error, so that coordinates whose
    /// true gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 400,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against `(f(θ+εe_k) − f(θ−εe_k)) / 2ε`.
///
/// `f` must be deterministic (no live dropout).
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    config: GradCheckConfig,
) -> GradCheckReport {
    assert_eq!(theta.len(), analytic.len(), "gradient length must match theta");
    let stride = theta.len().div_ceil(config.max_coords.max(1)).max(1);
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    for k in (0..theta.len()).step_by(stride) {
        probe[k] = theta[k] + config.eps;
        let up = f(&probe);
        probe[k] = theta[k] - config.eps;
        let down = f(&probe);
        probe[k] = theta[k];
        let numeric = (up - down) / (2.0 * config.eps);
        let err = relative_error(analytic[k], numeric, config.floor);
        report.coords_checked += 1;
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_coord = k;
            report.analytic = analytic[k];
            report.numeric = numeric;
        }
    }
    report
}
