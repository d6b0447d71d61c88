use crate::error::Result;

/// Central finite-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Floor of the relative-error denominator.
pub const FD_REL_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, FD_REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_REL_FLOOR)
}

/// Worst relative error between `analytic` and central differences of `f`
/// around `x0`, over the coordinates in `indices`.
pub fn finite_difference_check<F>(x0: &[f64], analytic: &[f64], indices: &[usize], mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for &i in indices {
        x[i] = x0[i] + FD_STEP;
        let plus = f(&x)?;
        x[i] = x0[i] - FD_STEP;
        let minus = f(&x)?;
        x[i] = x0[i];
        let fd = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(fd, analytic[i]));
    }
    Ok(worst)
}
