//! Matrix-free kernels for the two structured inverses used throughout the crate.
//!
//! `H = I + X P Xᵀ` is inverted through the symmetric Woodbury identity with a
//! `(K+1) × (K+1)` core, and the shifted rank-two matrix `λI + Q`, with
//! `Q = u cᵀ + c uᵀ`, is inverted in closed form.  Nothing here allocates an
//! `n × n` matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

/// Relative tolerance under which a column of `X` counts as linearly dependent
/// on the others.
const RANK_TOL: f64 = 1e-10;
/// Collinearity threshold on `|corr(u, c)|` for the eigen decomposition of `Q`.
const COLLINEAR_TOL: f64 = 1e-12;
/// Relative guard radius around each singular shift of `λI + Q`.
pub const SHIFT_GUARD: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowRankError {
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("design matrix is rank deficient; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<usize> },
    #[error("priority matrix must be symmetric positive semi-definite")]
    InvalidPriority,
    #[error("small core factorization failed")]
    CoreFactorization,
    #[error("u and c are collinear (|corr| = {corr}); Q has a single nonzero eigenvalue")]
    Collinear { corr: f64 },
    #[error("shift {lambda2} is within the guard radius of singular point {singular}")]
    SingularShift { lambda2: f64, singular: f64 },
}

/// Applies `H = I + X P Xᵀ` and its inverse without forming either.
///
/// Internally `P = L Lᵀ` and the Woodbury core is `I + Lᵀ Xᵀ X L`, so zero
/// priorities are fine.
#[derive(Debug, Clone)]
pub struct HApplier {
    /// `X L`, n × (K+1).
    factor: DMatrix<f64>,
    core: Cholesky<f64, Dyn>,
}

impl HApplier {
    /// Diagonal priorities `p` (the normal path).
    pub fn new(x: &DMatrix<f64>, p: &DVector<f64>) -> Result<Self, LowRankError> {
        if p.len() != x.ncols() {
            return Err(LowRankError::DimensionMismatch {
                expected: x.ncols(),
                got: p.len(),
            });
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(LowRankError::InvalidPriority);
        }
        check_full_rank(x)?;
        let mut factor = x.clone();
        for (j, mut col) in factor.column_iter_mut().enumerate() {
            col *= p[j].sqrt();
        }
        Self::from_factor(factor)
    }

    /// Full symmetric positive semi-definite priority matrix.
    pub fn with_priority_matrix(x: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<Self, LowRankError> {
        let k1 = x.ncols();
        if p.nrows() != k1 || p.ncols() != k1 {
            return Err(LowRankError::DimensionMismatch {
                expected: k1,
                got: p.nrows(),
            });
        }
        check_full_rank(x)?;
        let root = psd_root(p)?;
        Self::from_factor(x * root)
    }

    fn from_factor(factor: DMatrix<f64>) -> Result<Self, LowRankError> {
        let k1 = factor.ncols();
        let core = DMatrix::identity(k1, k1) + factor.tr_mul(&factor);
        let core = Cholesky::new(core).ok_or(LowRankError::CoreFactorization)?;
        Ok(Self { factor, core })
    }

    pub fn n(&self) -> usize {
        self.factor.nrows()
    }

    /// `H v = v + X P Xᵀ v`.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>, LowRankError> {
        self.check_len(v)?;
        let inner = self.factor.tr_mul(v);
        Ok(v + &self.factor * inner)
    }

    /// `H⁻¹ v = v − X L (I + Lᵀ Xᵀ X L)⁻¹ Lᵀ Xᵀ v`.
    pub fn inv_apply(&self, v: &DVector<f64>) -> Result<DVector<f64>, LowRankError> {
        self.check_len(v)?;
        let inner = self.core.solve(&self.factor.tr_mul(v));
        Ok(v - &self.factor * inner)
    }

    /// `H⁻¹ M` column by column.
    pub fn inv_apply_columns(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>, LowRankError> {
        if m.nrows() != self.n() {
            return Err(LowRankError::DimensionMismatch {
                expected: self.n(),
                got: m.nrows(),
            });
        }
        let inner = self.core.solve(&self.factor.tr_mul(m));
        Ok(m - &self.factor * inner)
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<(), LowRankError> {
        if v.len() != self.n() {
            return Err(LowRankError::DimensionMismatch {
                expected: self.n(),
                got: v.len(),
            });
        }
        Ok(())
    }
}

pub fn h_inv_apply(h: &HApplier, v: &DVector<f64>) -> Result<DVector<f64>, LowRankError> {
    h.inv_apply(v)
}

/// Symmetric square root factor `L` with `P = L Lᵀ`, tolerating zero eigenvalues.
fn psd_root(p: &DMatrix<f64>) -> Result<DMatrix<f64>, LowRankError> {
    let asym = (p - p.transpose()).amax();
    let scale = p.amax().max(1.0);
    if asym > 1e-10 * scale || p.iter().any(|v| !v.is_finite()) {
        return Err(LowRankError::InvalidPriority);
    }
    let sym = (p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vecs = eig.eigenvectors;
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev < -1e-10 * scale {
            return Err(LowRankError::InvalidPriority);
        }
        let mut col = vecs.column_mut(j);
        col *= ev.max(0.0).sqrt();
    }
    Ok(vecs)
}

/// Verifies that `X` has full column rank, reporting the dependent columns.
///
/// Exact (or near-exact) duplicate pairs are reported together; otherwise the
/// first column that lies in the span of its predecessors is named.
pub fn check_full_rank(x: &DMatrix<f64>) -> Result<(), LowRankError> {
    let k1 = x.ncols();
    let norms: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = norms.iter().position(|&v| !(v > 0.0)) {
        return Err(LowRankError::RankDeficient { columns: vec![j] });
    }
    let gram = x.tr_mul(x);
    let mut cosine = gram.clone();
    for i in 0..k1 {
        for j in 0..k1 {
            cosine[(i, j)] = gram[(i, j)] / (norms[i] * norms[j]);
        }
    }
    for i in 0..k1 {
        for j in (i + 1)..k1 {
            if cosine[(i, j)].abs() > 1.0 - RANK_TOL {
                return Err(LowRankError::RankDeficient {
                    columns: vec![i, j],
                });
            }
        }
    }
    // Incremental Cholesky on the normalized Gram matrix.
    let mut l = DMatrix::<f64>::zeros(k1, k1);
    for j in 0..k1 {
        let mut d = cosine[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < RANK_TOL {
            return Err(LowRankError::RankDeficient { columns: vec![j] });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..k1 {
            let mut s = cosine[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(())
}

/// One eigenpair of `Q`.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub vector: DVector<f64>,
}

/// The two nonzero eigenpairs of `Q = u cᵀ + c uᵀ`, larger eigenvalue first.
pub fn q_eigenpairs(u: &DVector<f64>, c: &DVector<f64>) -> Result<[EigenPair; 2], LowRankError> {
    if u.len() != c.len() {
        return Err(LowRankError::DimensionMismatch {
            expected: u.len(),
            got: c.len(),
        });
    }
    let uu = u.norm_squared();
    let cc = c.norm_squared();
    let cu = c.dot(u);
    let corr = if uu > 0.0 && cc > 0.0 {
        cu / (uu * cc).sqrt()
    } else {
        1.0
    };
    if corr.abs() >= 1.0 - COLLINEAR_TOL {
        return Err(LowRankError::Collinear { corr });
    }
    let (nu, nc) = (uu.sqrt(), cc.sqrt());
    let root = nu * nc;
    let plus = c * nu + u * nc;
    let minus = c * nu - u * nc;
    Ok([
        EigenPair {
            value: cu + root,
            vector: plus.normalize(),
        },
        EigenPair {
            value: cu - root,
            vector: minus.normalize(),
        },
    ])
}

/// Closed-form inverse of `R = λI + u cᵀ + c uᵀ`:
///
/// `R⁻¹ = I/λ + A c uᵀ + B u cᵀ − C c cᵀ − D u uᵀ` with
/// `E = λ{cᵀc uᵀu − (λ + cᵀu)²}`, `A = B = (λ + cᵀu)/E`, `C = uᵀu/E`, `D = cᵀc/E`.
#[derive(Debug, Clone)]
pub struct RankTwoResolvent {
    pub lambda2: f64,
    pub u: DVector<f64>,
    pub c: DVector<f64>,
    pub a: f64,
    pub b: f64,
    pub cc_coef: f64,
    pub uu_coef: f64,
    pub e: f64,
}

impl RankTwoResolvent {
    pub fn new(lambda2: f64, u: &DVector<f64>, c: &DVector<f64>) -> Result<Self, LowRankError> {
        if u.len() != c.len() {
            return Err(LowRankError::DimensionMismatch {
                expected: u.len(),
                got: c.len(),
            });
        }
        let uu = u.norm_squared();
        let cc = c.norm_squared();
        let cu = c.dot(u);
        let coef = ResolventCoefficients::new(lambda2, uu, cc, cu)?;
        Ok(Self {
            lambda2,
            u: u.clone(),
            c: c.clone(),
            a: coef.a,
            b: coef.a,
            cc_coef: coef.cc,
            uu_coef: coef.uu,
            e: coef.e,
        })
    }

    /// `(λI + Q)⁻¹ v`.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>, LowRankError> {
        if v.len() != self.u.len() {
            return Err(LowRankError::DimensionMismatch {
                expected: self.u.len(),
                got: v.len(),
            });
        }
        let uv = self.u.dot(v);
        let cv = self.c.dot(v);
        let mut out = v / self.lambda2;
        out.axpy(self.a * uv - self.cc_coef * cv, &self.c, 1.0);
        out.axpy(self.b * cv - self.uu_coef * uv, &self.u, 1.0);
        Ok(out)
    }
}

pub fn resolvent_apply(
    r: &RankTwoResolvent,
    v: &DVector<f64>,
) -> Result<DVector<f64>, LowRankError> {
    r.apply(v)
}

/// Scalar part of the resolvent, usable with precomputed inner products.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ResolventCoefficients {
    /// Coefficient on both `c uᵀ` and `u cᵀ`.
    pub a: f64,
    /// Coefficient on `c cᵀ` (subtracted).
    pub cc: f64,
    /// Coefficient on `u uᵀ` (subtracted).
    pub uu: f64,
    pub e: f64,
}

impl ResolventCoefficients {
    pub fn new(lambda2: f64, uu: f64, cc: f64, cu: f64) -> Result<Self, LowRankError> {
        let root = (uu * cc).sqrt();
        for singular in [0.0, -(cu + root), -(cu - root)] {
            if (lambda2 - singular).abs() <= SHIFT_GUARD * (1.0 + singular.abs()) {
                return Err(LowRankError::SingularShift { lambda2, singular });
            }
        }
        let shifted = lambda2 + cu;
        let e = lambda2 * (cc * uu - shifted * shifted);
        if !(e.abs() > 1e-14 * (1.0f64).max(lambda2 * lambda2 * uu * cc)) {
            return Err(LowRankError::SingularShift {
                lambda2,
                singular: lambda2,
            });
        }
        Ok(Self {
            a: shifted / e,
            cc: uu / e,
            uu: cc / e,
            e,
        })
    }
}
