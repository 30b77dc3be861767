//! Dense-quadrature reference values for the 1D operator.
//!
//! Independent of the assembled form: the principal value is evaluated from
//! a closure on the whole line, so tests can compare the discrete operator
//! against it. Closures must be piecewise smooth; pass every kink or jump
//! location in `breakpoints`.

use crate::error::{Error, Result};
use crate::geometry::segment_kernel_integral;
use crate::quadrature::gl20;

/// `(a/2) ∫ (2u(x) − u(x+z) − u(x−z)) |z|^{−1−2s} dz`.
///
/// Panels are graded geometrically (`depth` levels) toward every breakpoint
/// distance and toward `z = 0`. Beyond the last breakpoint `u` is assumed
/// constant on each side; the remaining tail is integrated exactly.
pub fn oracle_pv<F: Fn(f64) -> f64>(u: F, x: f64, s: f64, a: f64, depth: usize, breakpoints: &[f64]) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidParameter(format!("s = {s} not in (0, 1)")));
    }
    if depth == 0 {
        return Err(Error::InvalidParameter("quadrature depth must be positive".into()));
    }
    let ux = u(x);
    if !ux.is_finite() {
        return Err(Error::NonFinite("oracle sample"));
    }
    let mut cuts: Vec<f64> = vec![0.0];
    cuts.extend(breakpoints.iter().map(|b| (b - x).abs()).filter(|d| *d > 0.0));
    let reach = cuts.iter().copied().fold(1.0_f64, f64::max) + 1.0;
    cuts.push(reach);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let rule = gl20();
    let mut bad = false;
    let mut integrand = |z: f64| {
        let v = (2.0 * ux - u(x + z) - u(x - z)) * z.powf(-1.0 - 2.0 * s);
        if !v.is_finite() {
            bad = true;
        }
        v
    };
    let mut total = 0.0;
    for w in cuts.windows(2) {
        for (lo, hi) in graded_panels(w[0], w[1], depth) {
            total += rule.integrate(lo, hi, &mut integrand);
        }
    }
    let far = 2.0 * ux - u(x + reach) - u(x - reach);
    if bad || !far.is_finite() {
        return Err(Error::NonFinite("oracle sample"));
    }
    total += far * reach.powf(-2.0 * s) / (2.0 * s);
    Ok(a * total)
}

/// Value at an exterior point `y` of the continuous nonlocal Neumann
/// extension: `∫_Ω u K(y,·) / ∫_Ω K(y,·)` for Ω = (lo, hi).
pub fn continuous_neumann_extension<F: Fn(f64) -> f64>(
    u: F,
    lo: f64,
    hi: f64,
    y: f64,
    s: f64,
    depth: usize,
) -> Result<f64> {
    if y > lo && y < hi {
        return Err(Error::InvalidParameter(format!("{y} lies inside ({lo}, {hi})")));
    }
    let rule = gl20();
    let mut num = 0.0;
    for (a, b) in graded_panels(lo, hi, depth) {
        num += rule.integrate(a, b, |x| u(x) * (y - x).abs().powf(-1.0 - 2.0 * s));
    }
    let den = segment_kernel_integral(y, lo, hi, s);
    let v = num / den;
    if !v.is_finite() {
        return Err(Error::NonFinite("extension quadrature"));
    }
    Ok(v)
}

/// Panels on `[lo, hi]` refined geometrically toward both ends.
fn graded_panels(lo: f64, hi: f64, depth: usize) -> Vec<(f64, f64)> {
    let half = 0.5 * (hi - lo);
    let mut pts = vec![lo, lo + half, hi];
    let mut step = half;
    for _ in 0..depth {
        step *= 0.5;
        pts.push(lo + step);
        pts.push(hi - step);
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts.windows(2).map(|w| (w[0], w[1])).collect()
}
