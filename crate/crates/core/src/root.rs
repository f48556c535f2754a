//! Bracketed scalar root finding: secant steps guarded by bisection.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RootError {
    #[error("no sign change on [{a}, {b}] (f(a) = {fa}, f(b) = {fb})")]
    NoSignChange { a: f64, fa: f64, b: f64, fb: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootOutcome {
    pub root: f64,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Finds a zero of `f` inside `[a, b]`, given `f(a)` and `f(b)` of opposite sign.
///
/// Each step tries the secant through the two latest iterates and falls back to
/// bisection when the secant leaves the bracket, when `f` is not finite there,
/// or when the bracket failed to halve over the last two steps.  Stops once
/// `|f| < tol` or the bracket collapses to a few ulps.
pub fn safeguarded_secant<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    tol: f64,
    max_iter: usize,
) -> Result<RootOutcome, RootError> {
    if fa == 0.0 {
        return Ok(RootOutcome {
            root: a,
            value: fa,
            iterations: 0,
            converged: true,
        });
    }
    if fb == 0.0 {
        return Ok(RootOutcome {
            root: b,
            value: fb,
            iterations: 0,
            converged: true,
        });
    }
    if !(fa.is_finite() && fb.is_finite()) || fa.signum() == fb.signum() {
        return Err(RootError::NoSignChange { a, fa, b, fb });
    }
    let (mut lo, mut flo, mut hi, mut fhi) = if a < b {
        (a, fa, b, fb)
    } else {
        (b, fb, a, fa)
    };
    let (mut x0, mut f0, mut x1, mut f1) = (lo, flo, hi, fhi);
    let mut best = if fa.abs() < fb.abs() {
        (a, fa)
    } else {
        (b, fb)
    };
    let mut widths = [hi - lo; 3];

    for iter in 1..=max_iter {
        let mid = 0.5 * (lo + hi);
        let mut x = if f1 != f0 {
            x1 - f1 * (x1 - x0) / (f1 - f0)
        } else {
            f64::NAN
        };
        let stalled = iter > 2 && widths[2] > 0.5 * widths[0];
        if !(x > lo && x < hi) || stalled {
            x = mid;
        }
        let mut fx = f(x);
        if !fx.is_finite() && x != mid {
            x = mid;
            fx = f(x);
        }
        if !fx.is_finite() {
            return Ok(RootOutcome {
                root: best.0,
                value: best.1,
                iterations: iter,
                converged: false,
            });
        }
        if fx.abs() < best.1.abs() {
            best = (x, fx);
        }
        if fx.abs() < tol || fx == 0.0 {
            return Ok(RootOutcome {
                root: x,
                value: fx,
                iterations: iter,
                converged: true,
            });
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
        } else {
            hi = x;
            fhi = fx;
        }
        x0 = x1;
        f0 = f1;
        x1 = x;
        f1 = fx;
        widths = [widths[1], widths[2], hi - lo];
        if hi - lo <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs()) {
            let (root, value) = if flo.abs() < fhi.abs() {
                (lo, flo)
            } else {
                (hi, fhi)
            };
            return Ok(RootOutcome {
                root,
                value,
                iterations: iter,
                converged: value.abs() < tol,
            });
        }
    }
    Ok(RootOutcome {
        root: best.0,
        value: best.1,
        iterations: max_iter,
        converged: false,
    })
}
