//! Sensitivity of a calibration estimate to one further auxiliary variable.
//!
//! For a hypothetical standardized variable `x` with target `t` and priority
//! `p`, re-calibration changes the estimate by
//! `Δθ̂ = −p δ xᵀc / (1 + p xᵀH⁻¹x)` with `δ = xᵀu − t` and `c = H⁻¹y`.
//! The extreme variable is a stationary point of `−δ xᵀc` on the sphere
//! `xᵀx = n`, restricted either to the orthogonal complement of `X`
//! (orthogonal mode) or to centered vectors (centered mode).  Stationary
//! points are `x = t Z c` with `Z` built from the resolvent of `λ₂I + Q`,
//! and `λ₂` solves `log(xᵀx) = log n`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{AuxDesign, CalibrationResult};
use crate::lowrank::{
    q_eigenpairs, HApplier, LowRankError, RankTwoResolvent, SHIFT_GUARD,
};
use crate::root::safeguarded_secant;

#[derive(Debug, Error, Clone)]
pub enum SensitivityError {
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(
        "t_new must be nonzero and finite (got {0}); the solution degenerates to the zero vector"
    )]
    DegenerateTarget(f64),
    #[error("no root of log(x'x) = log(n) found over {} scanned values of lambda2", .0.points.len())]
    NoRoot(Box<ScanTrace>),
    #[error("constraint system X'R^-1 X is singular at lambda2 = {0}")]
    InnerSingular(f64),
    #[error("direction vector is zero; y lies in the constraint space")]
    ZeroDirection,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero variance input to correlation")]
    ZeroVariance,
    #[error("invalid sensitivity configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    Orthogonal,
    Centered,
    DeltaBoundedOrthogonal,
    DeltaBoundedCentered,
}

impl SensitivityMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Orthogonal => "orthogonal",
            Self::Centered => "centered",
            Self::DeltaBoundedOrthogonal => "delta_bounded_orthogonal",
            Self::DeltaBoundedCentered => "delta_bounded_centered",
        }
    }

    fn is_delta_bounded(self) -> bool {
        matches!(
            self,
            Self::DeltaBoundedOrthogonal | Self::DeltaBoundedCentered
        )
    }

    fn orthogonal(self) -> bool {
        matches!(self, Self::Orthogonal | Self::DeltaBoundedOrthogonal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityConfig {
    /// Largest plausible priority of the new variable.
    pub p_new: f64,
    /// Largest plausible |t| of the new variable, standardized scale.
    pub t_max: f64,
    pub t_grid_size: usize,
    pub mode: SensitivityMode,
    pub delta_bound: f64,
    /// Log-spaced scan points per side of each interval between singular shifts.
    pub lambda_scan: usize,
    pub root_tol: f64,
    pub max_iter: usize,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            p_new: 0.1,
            t_max: 5000.0,
            t_grid_size: 10,
            mode: SensitivityMode::Orthogonal,
            delta_bound: 1000.0,
            lambda_scan: 512,
            root_tol: 1e-10,
            max_iter: 200,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<(), SensitivityError> {
        let bad = |m: &str| Err(SensitivityError::InvalidConfig(m.to_string()));
        if !(self.p_new >= 0.0) || !self.p_new.is_finite() {
            return bad("p_new must be >= 0");
        }
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return bad("t_max must be > 0");
        }
        if self.t_grid_size < 2 {
            return bad("t_grid_size must be >= 2");
        }
        if !(self.root_tol > 0.0) {
            return bad("root_tol must be > 0");
        }
        if self.lambda_scan < 2 {
            return bad("lambda_scan must be >= 2");
        }
        if self.mode.is_delta_bounded() && !(self.delta_bound > 0.0) {
            return bad("delta_bound must be > 0");
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: SensitivityMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }
}

/// Constraint columns with their cached inner products.
/// A constraint `Mᵀx = 0` and the parts of `u` and `c` orthogonal to `M`.
///
/// On that complement the stationarity condition reduces to
/// `(λ₂I + ũc̃ᵀ + c̃ũᵀ) x = t c̃`, so `x = t(α c̃ + β ũ)` with
/// `α = (λ₂ + c̃ᵀũ)/D`, `β = −c̃ᵀc̃/D` and `D = λ₂² + 2c̃ᵀũ λ₂ − κ`,
/// `κ = c̃ᵀc̃ ũᵀũ − (c̃ᵀũ)²`.
#[derive(Debug, Clone)]
struct Constraint {
    m: DMatrix<f64>,
    mtc: DVector<f64>,
    up: DVector<f64>,
    cp: DVector<f64>,
    cc: f64,
    cu: f64,
    kappa: f64,
    /// Roots of `D`, where `xᵀx` is unbounded, ascending.
    poles: [f64; 2],
}

impl Constraint {
    fn new(m: DMatrix<f64>, u: &DVector<f64>, c: &DVector<f64>) -> Result<Self, SensitivityError> {
        let mtu = m.tr_mul(u);
        let mtc = m.tr_mul(c);
        let chol = m.tr_mul(&m).cholesky().ok_or(LowRankError::RankDeficient {
            columns: Vec::new(),
        })?;
        let up = u - &m * chol.solve(&mtu);
        let cp = c - &m * chol.solve(&mtc);
        let (uu, cc, cu) = (up.norm_squared(), cp.norm_squared(), cp.dot(&up));
        let root = (uu * cc).sqrt();
        Ok(Self {
            kappa: (cc * uu - cu * cu).max(0.0),
            poles: [-cu - root, -cu + root],
            m,
            mtc,
            up,
            cp,
            cc,
            cu,
        })
    }

    /// `(α, β)` of the stationary point per unit `t`.
    fn coefficients(&self, lambda2: f64) -> Result<(f64, f64), SensitivityError> {
        if !(self.cc > 0.0) {
            return Err(SensitivityError::ZeroDirection);
        }
        let d = (lambda2 - self.poles[0]) * (lambda2 - self.poles[1]);
        if d == 0.0 || !d.is_finite() {
            return Err(SensitivityError::InnerSingular(lambda2));
        }
        Ok(((lambda2 + self.cu) / d, -self.cc / d))
    }

    /// `xᵀx / t²`.
    fn norm_sq_per_t2(&self, lambda2: f64) -> f64 {
        let d = (lambda2 - self.poles[0]) * (lambda2 - self.poles[1]);
        self.cc * (lambda2 * lambda2 + self.kappa) / (d * d)
    }
}

/// Everything that depends on the sample, the calibration and one outcome.
#[derive(Debug, Clone)]
pub struct SensitivityContext {
    pub u: DVector<f64>,
    pub c: DVector<f64>,
    pub y: DVector<f64>,
    pub h: HApplier,
    /// Nonzero eigenvalues of `Q`, larger first.
    pub eigen: [f64; 2],
    cc: f64,
    orth: Constraint,
    centered: Constraint,
}

impl SensitivityContext {
    pub fn new<D: AuxDesign + ?Sized>(
        design: &D,
        calibration: &CalibrationResult,
        y: &DVector<f64>,
    ) -> Result<Self, SensitivityError> {
        Self::from_parts(
            design.x(),
            calibration.h.clone(),
            calibration.u.clone(),
            y.clone(),
        )
    }

    pub fn from_parts(
        x: &DMatrix<f64>,
        h: HApplier,
        u: DVector<f64>,
        y: DVector<f64>,
    ) -> Result<Self, SensitivityError> {
        let n = x.nrows();
        for len in [u.len(), y.len(), h.n()] {
            if len != n {
                return Err(SensitivityError::DimensionMismatch {
                    expected: n,
                    got: len,
                });
            }
        }
        let c = h.inv_apply(&y)?;
        let pairs = q_eigenpairs(&u, &c)?;
        let orth = Constraint::new(x.clone(), &u, &c)?;
        let centered = Constraint::new(DMatrix::from_element(n, 1, 1.0), &u, &c)?;
        Ok(Self {
            eigen: [pairs[0].value, pairs[1].value],
            cc: c.norm_squared(),
            u,
            c,
            y,
            h,
            orth,
            centered,
        })
    }

    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.orth.m
    }

    /// Shifts `{−e₁, 0, −e₂}` at which `λ₂I + Q` is singular, ascending.
    pub fn singular_shifts(&self) -> [f64; 3] {
        [-self.eigen[0], 0.0, -self.eigen[1]]
    }

    /// Poles of `x(λ₂)` under the mode's constraint, which the `λ₂` scan
    /// never steps across; ascending, merged when numerically equal.
    pub fn excluded_shifts(&self, mode: SensitivityMode) -> Vec<f64> {
        let mut pts: Vec<f64> = self.constraint(mode).poles.to_vec();
        pts.dedup_by(|a, b| (*a - *b).abs() <= SHIFT_GUARD * (1.0 + b.abs()));
        pts
    }

    fn constraint(&self, mode: SensitivityMode) -> &Constraint {
        if mode.orthogonal() {
            &self.orth
        } else {
            &self.centered
        }
    }

    pub fn resolvent(&self, lambda2: f64) -> Result<RankTwoResolvent, SensitivityError> {
        Ok(RankTwoResolvent::new(lambda2, &self.u, &self.c)?)
    }

    /// `Z v` for the given mode, where
    /// `Z = [I − R⁻¹M(MᵀR⁻¹M)⁻¹Mᵀ] R⁻¹` and `M` is `X` or `1`.
    pub fn z_apply(
        &self,
        lambda2: f64,
        mode: SensitivityMode,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>, SensitivityError> {
        let r = self.resolvent(lambda2)?;
        let cons = self.constraint(mode);
        let rv = r.apply(v)?;
        let mut rm = cons.m.clone();
        for mut col in rm.column_iter_mut() {
            let applied = r.apply(&col.clone_owned())?;
            col.copy_from(&applied);
        }
        let inner = cons.m.tr_mul(&rm);
        let rhs = cons.m.tr_mul(&rv);
        let coef = inner
            .lu()
            .solve(&rhs)
            .ok_or(SensitivityError::InnerSingular(lambda2))?;
        Ok(rv - rm * coef)
    }

    fn candidate_fast(
        &self,
        t_new: f64,
        lambda2: f64,
        cons: &Constraint,
    ) -> Result<DVector<f64>, SensitivityError> {
        let (alpha, beta) = cons.coefficients(lambda2)?;
        let mut x = &cons.cp * (t_new * alpha);
        x.axpy(t_new * beta, &cons.up, 1.0);
        Ok(x)
    }
}

/// `u_† = u − [p δ / (1 + p xᵀH⁻¹x)] H⁻¹x`.
pub fn recalibrate(
    ctx: &SensitivityContext,
    x_new: &DVector<f64>,
    t_new: f64,
    p_new: f64,
) -> Result<DVector<f64>, SensitivityError> {
    let (factor, hx) = update_factor(ctx, x_new, t_new, p_new)?;
    Ok(&ctx.u - hx * factor)
}

fn update_factor(
    ctx: &SensitivityContext,
    x_new: &DVector<f64>,
    t_new: f64,
    p_new: f64,
) -> Result<(f64, DVector<f64>), SensitivityError> {
    if x_new.len() != ctx.n() {
        return Err(SensitivityError::DimensionMismatch {
            expected: ctx.n(),
            got: x_new.len(),
        });
    }
    let hx = ctx.h.inv_apply(x_new)?;
    let delta = x_new.dot(&ctx.u) - t_new;
    Ok((p_new * delta / (1.0 + p_new * x_new.dot(&hx)), hx))
}

/// Closed-form change of the estimate after re-calibration on `x_new`.
pub fn delta_theta_exact(
    ctx: &SensitivityContext,
    x_new: &DVector<f64>,
    t_new: f64,
    p_new: f64,
) -> Result<f64, SensitivityError> {
    let (factor, _) = update_factor(ctx, x_new, t_new, p_new)?;
    Ok(-factor * x_new.dot(&ctx.c))
}

/// Stationary point `x = t Z c` at a given `λ₂`, with `Z` applied through
/// the resolvent and a dense `(K+1)`-dimensional inner solve.
pub fn candidate_x(
    ctx: &SensitivityContext,
    t_new: f64,
    lambda2: f64,
    mode: SensitivityMode,
) -> Result<DVector<f64>, SensitivityError> {
    if t_new == 0.0 || !t_new.is_finite() {
        return Err(SensitivityError::DegenerateTarget(t_new));
    }
    ctx.candidate_fast(t_new, lambda2, ctx.constraint(mode))
}

/// Sampled values of `g(λ₂) = log(xᵀx) − log n`.
#[derive(Debug, Clone, Default)]
pub struct ScanTrace {
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaRoot {
    pub lambda2: f64,
    /// `xᵀx / n` at the root.
    pub norm_ratio: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Log-spaced scan points for each open interval between the excluded
/// shifts, clustered at both ends of the bounded intervals and extending
/// outward from the outer ones.
fn scan_grid(
    ctx: &SensitivityContext,
    cons: &Constraint,
    shifts: &[f64],
    t_new: f64,
    per_side: usize,
) -> Vec<f64> {
    let last = shifts.len() - 1;
    let scale = cons.poles[0]
        .abs()
        .max(cons.poles[1].abs())
        .max(t_new.abs() * cons.cc.sqrt() / (ctx.n() as f64).sqrt());
    let logspace = |lo: f64, hi: f64| -> Vec<f64> {
        let (a, b) = (lo.ln(), hi.ln());
        (0..per_side)
            .map(move |i| (a + (b - a) * i as f64 / (per_side - 1) as f64).exp())
            .collect()
    };
    let mut grid = Vec::with_capacity(8 * per_side);
    let guard = |s: f64| 2.0 * SHIFT_GUARD * (1.0 + s.abs());
    for d in logspace(guard(shifts[0]).max(1e-12 * scale), 1e4 * scale) {
        grid.push(shifts[0] - d);
    }
    for d in logspace(guard(shifts[last]).max(1e-12 * scale), 1e4 * scale) {
        grid.push(shifts[last] + d);
    }
    for pair in shifts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let half = 0.5 * (b - a);
        if guard(a).max(guard(b)) >= half {
            continue;
        }
        for d in logspace(guard(a).max(1e-12 * half), half) {
            grid.push(a + d);
        }
        for d in logspace(guard(b).max(1e-12 * half), half) {
            grid.push(b - d);
        }
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    grid
}

/// Finds every `λ₂` with `xᵀx = n` detectable as a sign change of
/// `log(xᵀx) − log n` on the scan grid.
pub fn solve_lambda2(
    ctx: &SensitivityContext,
    t_new: f64,
    mode: SensitivityMode,
    cfg: &SensitivityConfig,
) -> Result<Vec<LambdaRoot>, SensitivityError> {
    if t_new == 0.0 || !t_new.is_finite() {
        return Err(SensitivityError::DegenerateTarget(t_new));
    }
    let cons = ctx.constraint(mode);
    let log_n = (ctx.n() as f64).ln();
    let t2 = t_new * t_new;
    let coarse = |l: f64| match cons.norm_sq_per_t2(l) {
        v if v > 0.0 && v.is_finite() => (t2 * v).ln() - log_n,
        _ => f64::NAN,
    };
    let exact = |l: f64| match ctx.candidate_fast(t_new, l, cons) {
        Ok(x) => x.norm_squared().ln() - log_n,
        Err(_) => f64::NAN,
    };
    let shifts = ctx.excluded_shifts(mode);
    let trace = ScanTrace {
        points: scan_grid(ctx, cons, &shifts, t_new, cfg.lambda_scan)
            .into_iter()
            .map(|l| (l, coarse(l)))
            .collect(),
    };
    let mut roots = Vec::new();
    for pair in trace.points.windows(2) {
        let ((a, ga), (b, gb)) = (pair[0], pair[1]);
        if !(ga.is_finite() && gb.is_finite()) || ga.signum() == gb.signum() {
            continue;
        }
        // Never bracket across a singular shift or a pole.
        if shifts.iter().any(|&s| a < s && s < b) {
            continue;
        }
        let (fa, fb) = (exact(a), exact(b));
        if !(fa.is_finite() && fb.is_finite()) || fa.signum() == fb.signum() {
            continue;
        }
        if let Ok(out) = safeguarded_secant(exact, a, fa, b, fb, cfg.root_tol, cfg.max_iter) {
            if out.converged {
                roots.push(LambdaRoot {
                    lambda2: out.root,
                    norm_ratio: out.value.exp(),
                    iterations: out.iterations,
                    converged: true,
                });
            }
        }
    }
    if roots.is_empty() {
        return Err(SensitivityError::NoRoot(Box::new(trace)));
    }
    Ok(roots)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootCandidate {
    pub lambda2: f64,
    pub objective: f64,
    pub delta_theta: f64,
}

#[derive(Debug, Clone)]
pub struct ExtremeVariable {
    pub mode: SensitivityMode,
    pub x: DVector<f64>,
    pub lambda2: f64,
    pub t_new: f64,
    pub p_new: f64,
    /// `xᵀu − t`.
    pub delta_new: f64,
    pub delta_theta_exact: f64,
    pub delta_theta_approx: f64,
    /// `−δ xᵀH⁻¹y`.
    pub objective: f64,
    pub all_roots: Vec<RootCandidate>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `|Mᵀx| / n` over the constraint columns.
    pub constraint_residual: f64,
    /// Shifts and poles the search never brackets across.
    pub unexplored: Vec<f64>,
}

impl ExtremeVariable {
    pub fn abs_delta_theta(&self) -> f64 {
        self.delta_theta_exact.abs()
    }
}

fn constraint_residual(cons: &Constraint, x: &DVector<f64>, n: usize) -> f64 {
    cons.m.tr_mul(x).amax() / n as f64
}

/// The extreme plausible new variable for one value of `t`.
///
/// Every `λ₂` root yields a stationary point; the one with the largest
/// `|Δθ̂|` is returned, ties going to the larger objective and then to the
/// smaller `|λ₂|`.
pub fn extreme_variable(
    ctx: &SensitivityContext,
    t_new: f64,
    cfg: &SensitivityConfig,
) -> Result<ExtremeVariable, SensitivityError> {
    if cfg.mode.is_delta_bounded() {
        return delta_bounded_extreme(ctx, cfg.delta_bound, cfg.p_new, cfg.mode);
    }
    let roots = solve_lambda2(ctx, t_new, cfg.mode, cfg)?;
    let mut best: Option<(RootCandidate, DVector<f64>, LambdaRoot)> = None;
    let mut all = Vec::with_capacity(roots.len());
    for root in roots {
        let x = candidate_x(ctx, t_new, root.lambda2, cfg.mode)?;
        let objective = -(x.dot(&ctx.u) - t_new) * x.dot(&ctx.c);
        let delta_theta = delta_theta_exact(ctx, &x, t_new, cfg.p_new)?;
        let cand = RootCandidate {
            lambda2: root.lambda2,
            objective,
            delta_theta,
        };
        all.push(cand);
        let better = match &best {
            None => true,
            Some((b, _, _)) => prefer(&cand, b),
        };
        if better {
            best = Some((cand, x, root));
        }
    }
    let (cand, x, root) = best.expect("at least one root");
    let zc = &x / t_new;
    let delta_theta_approx = delta_theta_approx(ctx, t_new, cfg.p_new, &zc);
    Ok(ExtremeVariable {
        mode: cfg.mode,
        delta_new: x.dot(&ctx.u) - t_new,
        constraint_residual: constraint_residual(ctx.constraint(cfg.mode), &x, ctx.n()),
        x,
        lambda2: cand.lambda2,
        t_new,
        p_new: cfg.p_new,
        delta_theta_exact: cand.delta_theta,
        delta_theta_approx,
        objective: cand.objective,
        all_roots: all,
        iterations: root.iterations,
        converged: root.converged,
        unexplored: ctx.excluded_shifts(cfg.mode),
    })
}

fn prefer(a: &RootCandidate, b: &RootCandidate) -> bool {
    let (da, db) = (a.delta_theta.abs(), b.delta_theta.abs());
    let tol = 1e-9 * da.max(db);
    if (da - db).abs() > tol {
        return da > db;
    }
    let otol = 1e-9 * a.objective.abs().max(b.objective.abs());
    if (a.objective - b.objective).abs() > otol {
        return a.objective > b.objective;
    }
    a.lambda2.abs() < b.lambda2.abs()
}

/// `Δθ̂ ≐ −p t² (uᵀZc − 1) cᵀZc`, the change without its denominator.
pub fn delta_theta_approx(
    ctx: &SensitivityContext,
    t_new: f64,
    p_new: f64,
    zc: &DVector<f64>,
) -> f64 {
    -p_new * t_new * t_new * (ctx.u.dot(zc) - 1.0) * ctx.c.dot(zc)
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub t: f64,
    pub extreme: Option<ExtremeVariable>,
    /// Largest `|Δθ̂|` over grid points up to and including this one.
    pub running_max: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub mode: SensitivityMode,
    pub points: Vec<SweepPoint>,
    pub failures: usize,
}

impl SweepResult {
    /// Largest `|Δθ̂|` over the grid and the point attaining it.
    pub fn maximum(&self) -> Option<&ExtremeVariable> {
        self.points.iter().filter_map(|p| p.extreme.as_ref()).fold(
            None,
            |acc: Option<&ExtremeVariable>, e| match acc {
                Some(b) if b.abs_delta_theta() >= e.abs_delta_theta() => Some(b),
                _ => Some(e),
            },
        )
    }
}

/// Evaluates the extreme variable on `t = T·i/G`, `i = 1..G`.
pub fn sweep_t(
    ctx: &SensitivityContext,
    cfg: &SensitivityConfig,
) -> Result<SweepResult, SensitivityError> {
    cfg.validate()?;
    let g = cfg.t_grid_size;
    let results: Vec<(f64, Option<ExtremeVariable>)> = (1..=g)
        .into_par_iter()
        .map(|i| {
            let t = cfg.t_max * i as f64 / g as f64;
            (t, extreme_variable(ctx, t, cfg).ok())
        })
        .collect();
    let mut running = 0.0f64;
    let mut failures = 0;
    let points = results
        .into_iter()
        .map(|(t, extreme)| {
            match &extreme {
                Some(e) => running = running.max(e.abs_delta_theta()),
                None => failures += 1,
            }
            SweepPoint {
                t,
                extreme,
                running_max: running,
            }
        })
        .collect();
    Ok(SweepResult {
        mode: cfg.mode,
        points,
        failures,
    })
}

/// Extreme variable under a bound on `|δ|` instead of `|t|`:
/// `x ∝ δ (n⁻¹MMᵀ − I) c`, normalized to `xᵀx = n`.  The approximation
/// reported is `p |δ| cᵀ(n⁻¹MMᵀ − I)c`; the implied target `xᵀu − δ` may be
/// implausible and is returned for inspection.
pub fn delta_bounded_extreme(
    ctx: &SensitivityContext,
    delta_bound: f64,
    p_new: f64,
    mode: SensitivityMode,
) -> Result<ExtremeVariable, SensitivityError> {
    if !(delta_bound > 0.0) {
        return Err(SensitivityError::InvalidConfig(
            "delta_bound must be > 0".into(),
        ));
    }
    let n = ctx.n() as f64;
    let cons = ctx.constraint(mode);
    let direction = &cons.m * &cons.mtc / n - &ctx.c;
    let norm = direction.norm();
    if !(norm > 1e-12 * ctx.cc.sqrt()) {
        return Err(SensitivityError::ZeroDirection);
    }
    let delta = delta_bound;
    let lambda2 = delta.abs() * norm / n.sqrt();
    let x = &direction * (delta / lambda2);
    let t_implied = x.dot(&ctx.u) - delta;
    let exact = delta_theta_exact(ctx, &x, t_implied, p_new)?;
    let approx = p_new * delta.abs() * ctx.c.dot(&direction);
    Ok(ExtremeVariable {
        mode: match mode {
            SensitivityMode::Orthogonal | SensitivityMode::DeltaBoundedOrthogonal => {
                SensitivityMode::DeltaBoundedOrthogonal
            }
            _ => SensitivityMode::DeltaBoundedCentered,
        },
        constraint_residual: constraint_residual(cons, &x, ctx.n()),
        objective: -delta * x.dot(&ctx.c),
        x,
        lambda2,
        t_new: t_implied,
        p_new,
        delta_new: delta,
        delta_theta_exact: exact,
        delta_theta_approx: approx,
        all_roots: Vec::new(),
        iterations: 0,
        converged: true,
        unexplored: Vec::new(),
    })
}

/// Pearson correlation of two solution vectors.
pub fn solution_correlation(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64, SensitivityError> {
    if a.len() != b.len() {
        return Err(SensitivityError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(SensitivityError::ZeroVariance);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Stationarity residual `‖−Qx + t c + Mλ₁ − λ₂x‖` with `λ₁` recomputed
/// from its closed form `−t (MᵀR⁻¹M)⁻¹ MᵀR⁻¹c`.
pub fn stationarity_residual(
    ctx: &SensitivityContext,
    ev: &ExtremeVariable,
) -> Result<f64, SensitivityError> {
    let cons = ctx.constraint(ev.mode);
    let r = ctx.resolvent(ev.lambda2)?;
    let rc = r.apply(&ctx.c)?;
    let mut rm = cons.m.clone();
    for mut col in rm.column_iter_mut() {
        let applied = r.apply(&col.clone_owned())?;
        col.copy_from(&applied);
    }
    let inner = cons.m.tr_mul(&rm);
    let lambda1 = inner
        .lu()
        .solve(&cons.m.tr_mul(&rc))
        .ok_or(SensitivityError::InnerSingular(ev.lambda2))?
        * -ev.t_new;
    let x = &ev.x;
    let qx = &ctx.u * ctx.c.dot(x) + &ctx.c * ctx.u.dot(x);
    let grad = -qx + &ctx.c * ev.t_new + &cons.m * lambda1 - x * ev.lambda2;
    Ok(grad.norm())
}
