//! Relaxed calibration: standardization of auxiliary data, the penalized
//! weight solution `u* = H⁻¹ s`, discrepancies and estimates.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lowrank::{HApplier, LowRankError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("column `{0}` has zero sample variance")]
    ZeroVariance(String),
    #[error("population size must be positive, got {0}")]
    NonPositivePopulation(f64),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("design weights must be positive")]
    NonPositiveWeight,
    #[error("invalid priorities: {0}")]
    InvalidPriority(String),
    #[error("transformation matrix is singular or badly conditioned (condition number {0:e})")]
    SingularTransform(f64),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
}

/// Anything that can be calibrated: a design matrix, its targets and the
/// population size `N` (which enters the dispersion term of the objective).
pub trait AuxDesign {
    fn x(&self) -> &DMatrix<f64>;
    fn t(&self) -> &DVector<f64>;
    fn n_pop(&self) -> f64;
    fn n(&self) -> usize {
        self.x().nrows()
    }
}

/// Design matrix with a leading ones column and standardized auxiliary
/// columns (unweighted sample mean zero, variance one with denominator `n`).
#[derive(Debug, Clone)]
pub struct StandardizedDesign {
    pub x: DMatrix<f64>,
    /// `t[0] = N`, `t[k] = (t°ₖ − N x̄°ₖ) / s°ₖ`.
    pub t: DVector<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl AuxDesign for StandardizedDesign {
    fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    fn t(&self) -> &DVector<f64> {
        &self.t
    }
    fn n_pop(&self) -> f64 {
        self.t[0]
    }
}

impl StandardizedDesign {
    pub fn k(&self) -> usize {
        self.x.ncols() - 1
    }

    /// Maps a standardized target back to the raw total of column `k ≥ 1`.
    pub fn raw_target(&self, k: usize) -> f64 {
        self.t[k] * self.sds[k - 1] + self.n_pop() * self.means[k - 1]
    }
}

/// A linearly transformed design `(X E, Eᵀ t)`; its first column need not be
/// the ones vector, so `N` is carried separately.
#[derive(Debug, Clone)]
pub struct TransformedDesign {
    pub x: DMatrix<f64>,
    pub t: DVector<f64>,
    pub n_pop: f64,
}

impl AuxDesign for TransformedDesign {
    fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    fn t(&self) -> &DVector<f64> {
        &self.t
    }
    fn n_pop(&self) -> f64 {
        self.n_pop
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorityWeights {
    Diagonal(DVector<f64>),
    /// Symmetric positive semi-definite; arises from linear transforms.
    Full(DMatrix<f64>),
}

/// Priorities `p₀..p_K` and the weight-alteration priority `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct Priorities {
    pub p: PriorityWeights,
    pub r: f64,
}

impl Priorities {
    pub fn new(p: Vec<f64>, r: f64) -> Result<Self, CalibrationError> {
        if let Some(bad) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(CalibrationError::InvalidPriority(format!(
                "negative or non-finite priority {bad}"
            )));
        }
        Self::check_r(r)?;
        Ok(Self {
            p: PriorityWeights::Diagonal(DVector::from_vec(p)),
            r,
        })
    }

    pub fn full(p: DMatrix<f64>, r: f64) -> Result<Self, CalibrationError> {
        Self::check_r(r)?;
        Ok(Self {
            p: PriorityWeights::Full(p),
            r,
        })
    }

    fn check_r(r: f64) -> Result<(), CalibrationError> {
        if !(0.0..=1.0).contains(&r) {
            return Err(CalibrationError::InvalidPriority(format!(
                "R = {r} outside [0, 1]"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.p {
            PriorityWeights::Diagonal(p) => p.len(),
            PriorityWeights::Full(p) => p.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `P v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.p {
            PriorityWeights::Diagonal(p) => p.component_mul(v),
            PriorityWeights::Full(p) => p * v,
        }
    }

    /// Diagonal values, if this is a diagonal priority.
    pub fn diagonal(&self) -> Option<&DVector<f64>> {
        match &self.p {
            PriorityWeights::Diagonal(p) => Some(p),
            PriorityWeights::Full(_) => None,
        }
    }

    pub fn h_applier(&self, x: &DMatrix<f64>) -> Result<HApplier, LowRankError> {
        match &self.p {
            PriorityWeights::Diagonal(p) => HApplier::new(x, p),
            PriorityWeights::Full(p) => HApplier::with_priority_matrix(x, p),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub u: DVector<f64>,
    pub deltas: DVector<f64>,
    pub objective: f64,
    /// Calibrated weights are not sign constrained; this counts `uᵢ < 0`.
    pub negative_weights: usize,
    pub h: HApplier,
}

impl CalibrationResult {
    pub fn estimate(&self, y: &DVector<f64>) -> Result<f64, CalibrationError> {
        estimate_total(&self.u, y)
    }
}

/// Standardizes raw auxiliary columns and their population totals.
pub fn standardize(
    raw_columns: &DMatrix<f64>,
    raw_targets: &[f64],
    n_pop: f64,
    names: &[String],
) -> Result<StandardizedDesign, CalibrationError> {
    let (n, k) = raw_columns.shape();
    if raw_targets.len() != k {
        return Err(CalibrationError::DimensionMismatch {
            what: "targets",
            expected: k,
            got: raw_targets.len(),
        });
    }
    if !(n_pop > 0.0) || !n_pop.is_finite() {
        return Err(CalibrationError::NonPositivePopulation(n_pop));
    }
    if raw_columns
        .iter()
        .chain(raw_targets)
        .any(|v| !v.is_finite())
    {
        return Err(CalibrationError::NonFinite("auxiliary data"));
    }
    let mut x = DMatrix::from_element(n, k + 1, 1.0);
    let mut t = DVector::zeros(k + 1);
    t[0] = n_pop;
    let mut means = Vec::with_capacity(k);
    let mut sds = Vec::with_capacity(k);
    for j in 0..k {
        let col = raw_columns.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            let name = names
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("x{}", j + 1));
            return Err(CalibrationError::ZeroVariance(name));
        }
        for i in 0..n {
            x[(i, j + 1)] = (col[i] - mean) / sd;
        }
        t[j + 1] = (raw_targets[j] - n_pop * mean) / sd;
        means.push(mean);
        sds.push(sd);
    }
    Ok(StandardizedDesign { x, t, means, sds })
}

/// `s = R w + (1 − R)(N/n) 1 + X P t`.
pub fn calibration_rhs<D: AuxDesign + ?Sized>(
    design: &D,
    w: &DVector<f64>,
    prio: &Priorities,
) -> Result<DVector<f64>, CalibrationError> {
    let n = design.n();
    check_inputs(design, w, prio)?;
    let mut s = design.x() * prio.apply(design.t());
    s.axpy(prio.r, w, 1.0);
    s.add_scalar_mut((1.0 - prio.r) * design.n_pop() / n as f64);
    Ok(s)
}

fn check_inputs<D: AuxDesign + ?Sized>(
    design: &D,
    w: &DVector<f64>,
    prio: &Priorities,
) -> Result<(), CalibrationError> {
    let n = design.n();
    let k1 = design.x().ncols();
    if w.len() != n {
        return Err(CalibrationError::DimensionMismatch {
            what: "design weights",
            expected: n,
            got: w.len(),
        });
    }
    if prio.len() != k1 || design.t().len() != k1 {
        return Err(CalibrationError::DimensionMismatch {
            what: "priorities",
            expected: k1,
            got: prio.len(),
        });
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(CalibrationError::NonFinite("design weights"));
    }
    if w.iter().any(|&v| v <= 0.0) {
        return Err(CalibrationError::NonPositiveWeight);
    }
    if design
        .x()
        .iter()
        .chain(design.t().iter())
        .any(|v| !v.is_finite())
    {
        return Err(CalibrationError::NonFinite("design"));
    }
    Ok(())
}

/// Minimizes the relaxed-calibration objective; `u* = H⁻¹ s`.
pub fn calibrate_weights<D: AuxDesign + ?Sized>(
    design: &D,
    w: &DVector<f64>,
    prio: &Priorities,
) -> Result<CalibrationResult, CalibrationError> {
    let s = calibration_rhs(design, w, prio)?;
    let h = prio.h_applier(design.x())?;
    let u = h.inv_apply(&s)?;
    let deltas = discrepancies(design, &u)?;
    let objective = objective_value(design, w, prio, &u)?;
    let negative_weights = u.iter().filter(|&&v| v < 0.0).count();
    Ok(CalibrationResult {
        u,
        deltas,
        objective,
        negative_weights,
        h,
    })
}

/// `F(u; w) = Σ pₖ δₖ² + R ‖u − w‖² + (1 − R) ‖u − (N/n) 1‖²`, evaluated term
/// by term.  For a full priority matrix the first term is `δᵀ P δ`.
pub fn objective_value<D: AuxDesign + ?Sized>(
    design: &D,
    w: &DVector<f64>,
    prio: &Priorities,
    u: &DVector<f64>,
) -> Result<f64, CalibrationError> {
    check_inputs(design, w, prio)?;
    let deltas = discrepancies(design, u)?;
    let penalty = deltas.dot(&prio.apply(&deltas));
    let alteration = (u - w).norm_squared();
    let mean_weight = design.n_pop() / design.n() as f64;
    let dispersion = u.iter().map(|v| (v - mean_weight).powi(2)).sum::<f64>();
    Ok(penalty + prio.r * alteration + (1.0 - prio.r) * dispersion)
}

/// `δₖ = xₖᵀ u − tₖ` for `k = 0..K`.
pub fn discrepancies<D: AuxDesign + ?Sized>(
    design: &D,
    u: &DVector<f64>,
) -> Result<DVector<f64>, CalibrationError> {
    if u.len() != design.n() {
        return Err(CalibrationError::DimensionMismatch {
            what: "weights",
            expected: design.n(),
            got: u.len(),
        });
    }
    Ok(design.x().tr_mul(u) - design.t())
}

/// `θ̂ = uᵀ y`.
pub fn estimate_total(u: &DVector<f64>, y: &DVector<f64>) -> Result<f64, CalibrationError> {
    if u.len() != y.len() {
        return Err(CalibrationError::DimensionMismatch {
            what: "outcome",
            expected: u.len(),
            got: y.len(),
        });
    }
    Ok(u.dot(y))
}

/// Reparametrizes the auxiliary space by a nonsingular `E`: `X_E = X E`,
/// `t_E = Eᵀ t`, `P_E = E⁻¹ P E⁻ᵀ`.  Calibrated weights are unchanged.
pub fn transform_design<D: AuxDesign + ?Sized>(
    design: &D,
    prio: &Priorities,
    e: &DMatrix<f64>,
) -> Result<(TransformedDesign, Priorities), CalibrationError> {
    let k1 = design.x().ncols();
    if e.nrows() != k1 || e.ncols() != k1 {
        return Err(CalibrationError::DimensionMismatch {
            what: "transform",
            expected: k1,
            got: e.nrows(),
        });
    }
    let sv = e.clone().svd(false, false).singular_values;
    let cond = sv.max() / sv.min();
    if !(cond < 1e12) {
        return Err(CalibrationError::SingularTransform(cond));
    }
    let e_inv = e
        .clone()
        .try_inverse()
        .ok_or(CalibrationError::SingularTransform(f64::INFINITY))?;
    let p = match &prio.p {
        PriorityWeights::Diagonal(p) => DMatrix::from_diagonal(p),
        PriorityWeights::Full(p) => p.clone(),
    };
    let p_e = &e_inv * p * e_inv.transpose();
    let p_e = (&p_e + p_e.transpose()) * 0.5;
    let transformed = TransformedDesign {
        x: design.x() * e,
        t: e.tr_mul(design.t()),
        n_pop: design.n_pop(),
    };
    Ok((transformed, Priorities::full(p_e, prio.r)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (1..=k).map(|j| format!("x{j}")).collect()
    }

    fn random_instance(
        seed: u64,
        n: usize,
        k: usize,
    ) -> (StandardizedDesign, DVector<f64>, Priorities) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(n, k, |_, _| rng.random_range(-3.0..5.0));
        let targets: Vec<f64> = (0..k).map(|_| rng.random_range(-50.0..250.0)).collect();
        let n_pop = 10.0 * n as f64;
        let design = standardize(&raw, &targets, n_pop, &names(k)).unwrap();
        let w = DVector::from_fn(n, |_, _| rng.random_range(5.0..15.0));
        let p = (0..=k).map(|_| rng.random_range(0.0..1.0)).collect();
        (
            design,
            w,
            Priorities::new(p, rng.random_range(0.0..1.0)).unwrap(),
        )
    }

    #[test]
    fn already_standard_column_is_fixed_point() {
        let col = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let d = standardize(&col, &[3.5], 40.0, &names(1)).unwrap();
        assert_eq!(d.x.column(1).as_slice(), col.as_slice());
        assert!((d.t[1] - 3.5).abs() < 1e-15);
        assert_eq!(d.t[0], 40.0);
    }

    #[test]
    fn affine_invariance_of_standardization() {
        let raw: Vec<f64> = vec![0.3, 2.0, -1.2, 4.4, 0.9, 1.1];
        let (a, b, n_pop, target) = (2.5, 7.0, 60.0, 42.0);
        let base = standardize(
            &DMatrix::from_column_slice(6, 1, &raw),
            &[target],
            n_pop,
            &names(1),
        )
        .unwrap();
        let shifted: Vec<f64> = raw.iter().map(|v| a * v - b).collect();
        let other = standardize(
            &DMatrix::from_column_slice(6, 1, &shifted),
            &[a * target - b * n_pop],
            n_pop,
            &names(1),
        )
        .unwrap();
        assert!((base.x.clone() - other.x).amax() < 1e-12);
        assert!((base.t[1] - other.t[1]).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_standardization() {
        let raw = DMatrix::from_fn(10, 1, |i, _| (i + 1) as f64);
        let d = standardize(&raw, &[550.0], 100.0, &names(1)).unwrap();
        assert!((d.means[0] - 5.5).abs() < 1e-15);
        assert!((d.sds[0] - 8.25f64.sqrt()).abs() < 1e-15);
        assert!(d.t[1].abs() < 1e-12);
        assert!((d.raw_target(1) - 550.0).abs() < 1e-9);
    }

    #[test]
    fn zero_variance_column_is_named() {
        let raw = DMatrix::from_fn(5, 2, |i, j| if j == 1 { 3.0 } else { i as f64 });
        let err = standardize(&raw, &[1.0, 2.0], 10.0, &["age".into(), "flat".into()]).unwrap_err();
        assert_eq!(err, CalibrationError::ZeroVariance("flat".into()));
    }

    #[test]
    fn nonpositive_population_rejected() {
        let raw = DMatrix::from_fn(5, 1, |i, _| i as f64);
        assert!(matches!(
            standardize(&raw, &[1.0], 0.0, &names(1)),
            Err(CalibrationError::NonPositivePopulation(_))
        ));
    }

    #[test]
    fn standardized_columns_satisfy_moment_invariants() {
        let (d, _, _) = random_instance(7, 40, 4);
        let n = 40.0;
        for k in 1..=4 {
            let col = d.x.column(k);
            assert!(col.sum().abs() < 1e-9 * n);
            assert!((col.norm_squared() - n).abs() < 1e-7 * n);
        }
    }

    #[test]
    fn no_pressure_keeps_design_weights() {
        let (d, w, _) = random_instance(1, 20, 2);
        let prio = Priorities::new(vec![0.0; 3], 1.0).unwrap();
        let res = calibrate_weights(&d, &w, &prio).unwrap();
        assert!((res.u.clone() - &w).amax() < 1e-12);
        assert!(res.objective.abs() < 1e-18);
    }

    #[test]
    fn half_r_without_priorities_blends_toward_mean_weight() {
        let (d, w, _) = random_instance(2, 20, 2);
        let prio = Priorities::new(vec![0.0; 3], 0.5).unwrap();
        let res = calibrate_weights(&d, &w, &prio).unwrap();
        let expected = w.map(|v| 0.5 * v + 0.5 * d.n_pop() / 20.0);
        assert!((res.u - expected).amax() < 1e-12);
    }

    #[test]
    fn matches_dense_quadratic_minimizer() {
        let (d, w, prio) = random_instance(30, 30, 3);
        let p = prio.diagonal().unwrap();
        let h = DMatrix::identity(30, 30) + &d.x * DMatrix::from_diagonal(p) * d.x.transpose();
        let s = calibration_rhs(&d, &w, &prio).unwrap();
        let expected = h.cholesky().unwrap().solve(&s);
        let got = calibrate_weights(&d, &w, &prio).unwrap().u;
        assert!((got - &expected).norm() / expected.norm() < 1e-10);
    }

    #[test]
    fn objective_trivial_values() {
        let (d, w, _) = random_instance(3, 12, 2);
        let none = Priorities::new(vec![0.0; 3], 1.0).unwrap();
        assert_eq!(objective_value(&d, &w, &none, &w).unwrap(), 0.0);
        let zero = DVector::zeros(12);
        let got = objective_value(&d, &w, &none, &zero).unwrap();
        assert!((got - w.norm_squared()).abs() < 1e-12 * got);
        // With R < 1 the dispersion term is measured about the mean weight N/n.
        let r = Priorities::new(vec![0.0; 3], 0.3).unwrap();
        let got = objective_value(&d, &w, &r, &zero).unwrap();
        let expected = 0.3 * w.norm_squared() + 0.7 * d.n_pop().powi(2) / 12.0;
        assert!((got - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn objective_matches_expanded_quadratic() {
        let (d, w, prio) = random_instance(4, 25, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let u = DVector::from_fn(25, |_, _| rng.random_range(0.0..20.0));
        let p = prio.diagonal().unwrap();
        let s = calibration_rhs(&d, &w, &prio).unwrap();
        let hu = &u + &d.x * p.component_mul(&d.x.tr_mul(&u));
        let dconst = d.t.dot(&p.component_mul(&d.t))
            + prio.r * w.norm_squared()
            + (1.0 - prio.r) * d.n_pop().powi(2) / 25.0;
        let expanded = u.dot(&hu) - 2.0 * u.dot(&s) + dconst;
        let direct = objective_value(&d, &w, &prio, &u).unwrap();
        assert!((expanded - direct).abs() < 1e-9 * direct.abs());
    }

    #[test]
    fn discrepancy_definitions() {
        let (d, w, prio) = random_instance(5, 15, 2);
        let pre = discrepancies(&d, &w).unwrap();
        let manual = d.x.transpose() * &w - &d.t;
        assert!((&pre - &manual).amax() < 1e-12 * manual.amax());
        let mut u = w.clone();
        u *= d.n_pop() / w.sum();
        assert!(discrepancies(&d, &u).unwrap()[0].abs() < 1e-9);
        let res = calibrate_weights(&d, &w, &prio).unwrap();
        let expected = d.x.transpose() * &res.u - &d.t;
        assert!((&res.deltas - &expected).amax() <= 1e-12 * expected.amax().max(1.0));
    }

    #[test]
    fn estimate_total_basics() {
        let u = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(estimate_total(&u, &DVector::zeros(2)).unwrap(), 0.0);
        assert_eq!(
            estimate_total(&u, &DVector::from_vec(vec![3.0, 4.0])).unwrap(),
            11.0
        );
        assert!(estimate_total(&u, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn rejects_bad_weights() {
        let (d, mut w, prio) = random_instance(6, 10, 1);
        w[3] = f64::NAN;
        assert!(matches!(
            calibrate_weights(&d, &w, &prio),
            Err(CalibrationError::NonFinite(_))
        ));
        w[3] = -1.0;
        assert!(matches!(
            calibrate_weights(&d, &w, &prio),
            Err(CalibrationError::NonPositiveWeight)
        ));
    }

    #[test]
    fn identity_transform_is_noop() {
        let (d, w, prio) = random_instance(8, 20, 2);
        let (td, tp) = transform_design(&d, &prio, &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(td.x, d.x);
        assert_eq!(td.t, d.t);
        let p = prio.diagonal().unwrap();
        match &tp.p {
            PriorityWeights::Full(m) => assert!((m - DMatrix::from_diagonal(p)).amax() < 1e-15),
            _ => unreachable!(),
        }
        let a = calibrate_weights(&d, &w, &prio).unwrap().u;
        let b = calibrate_weights(&td, &w, &tp).unwrap().u;
        assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn diagonal_transform_scales_priorities_by_inverse_squares() {
        let (d, _, prio) = random_instance(9, 20, 2);
        let e = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let (td, tp) = transform_design(&d, &prio, &e).unwrap();
        let p = prio.diagonal().unwrap();
        for k in 0..3 {
            let scale = e[(k, k)];
            assert!((td.x.column(k) - d.x.column(k) * scale).amax() < 1e-12);
            assert!((td.t[k] - d.t[k] * scale).abs() < 1e-9);
            if let PriorityWeights::Full(m) = &tp.p {
                assert!((m[(k, k)] - p[k] / (scale * scale)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn singular_transform_rejected() {
        let (d, _, prio) = random_instance(10, 20, 2);
        let mut e = DMatrix::identity(3, 3);
        e[(2, 2)] = 0.0;
        assert!(matches!(
            transform_design(&d, &prio, &e),
            Err(CalibrationError::SingularTransform(_))
        ));
    }

    #[test]
    fn raising_priority_does_not_increase_discrepancy() {
        let (d, w, prio) = random_instance(11, 40, 3);
        let base = prio.diagonal().unwrap().clone();
        for k in 0..4 {
            let mut last = f64::INFINITY;
            for pk in [0.0, 0.001, 0.01, 0.1, 1.0, 10.0] {
                let mut p = base.clone();
                p[k] = pk;
                let pr = Priorities::new(p.iter().copied().collect(), prio.r).unwrap();
                let delta = calibrate_weights(&d, &w, &pr).unwrap().deltas[k].abs();
                assert!(
                    delta <= last * (1.0 + 1e-12) + 1e-12,
                    "k={k} p={pk}: {delta} > {last}"
                );
                last = delta;
            }
        }
    }
}
