#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use relcal::calibrate::{
    calibrate_weights, standardize, CalibrationResult, Priorities, StandardizedDesign,
};
use relcal::sensitivity::SensitivityContext;

#[derive(Debug, Clone)]
pub struct Instance {
    pub design: StandardizedDesign,
    pub w: DVector<f64>,
    pub y: DVector<f64>,
    pub p: Vec<f64>,
    pub prio: Priorities,
}

impl Instance {
    /// Skewed auxiliaries, an outcome related to the first two of them and
    /// random priorities.
    pub fn random(seed: u64, n: usize, k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(n, k, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            if rng.random_bool(0.5) {
                z
            } else {
                z.exp()
            }
        });
        let n_pop = rng.random_range(5.0..40.0) * n as f64;
        let targets: Vec<f64> = (0..k)
            .map(|j| n_pop * (raw.column(j).mean() + rng.random_range(-0.3..0.3)))
            .collect();
        let names: Vec<String> = (1..=k).map(|j| format!("x{j}")).collect();
        let design = standardize(&raw, &targets, n_pop, &names).unwrap();
        let w = DVector::from_fn(n, |_, _| n_pop / n as f64 * rng.random_range(0.5..1.5));
        let y = DVector::from_fn(n, |i, _| {
            let noise: f64 = rng.sample(StandardNormal);
            3.0 + raw[(i, 0)] + if k > 1 { 0.5 * raw[(i, 1)] } else { 0.0 } + noise
        });
        let mut p = vec![rng.random_range(0.5..5.0)];
        p.extend((0..k).map(|_| 10f64.powf(rng.random_range(-3.0..0.0))));
        let prio = Priorities::new(p.clone(), rng.random_range(0.0..1.0)).unwrap();
        Self {
            design,
            w,
            y,
            p,
            prio,
        }
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn n_pop(&self) -> f64 {
        self.design.t[0]
    }

    pub fn calibrate(&self) -> CalibrationResult {
        calibrate_weights(&self.design, &self.w, &self.prio).unwrap()
    }

    pub fn context(&self) -> SensitivityContext {
        SensitivityContext::new(&self.design, &self.calibrate(), &self.y).unwrap()
    }

    /// `s = R w + (1 − R)(N/n) 1 + X P t`, built densely.
    pub fn rhs(&self) -> DVector<f64> {
        let r = self.prio.r;
        let pt = DVector::from_iterator(
            self.p.len(),
            self.p.iter().zip(self.design.t.iter()).map(|(a, b)| a * b),
        );
        &self.w * r
            + DVector::from_element(self.n(), (1.0 - r) * self.n_pop() / self.n() as f64)
            + &self.design.x * pt
    }
}

pub fn dense_h(x: &DMatrix<f64>, p: &[f64]) -> DMatrix<f64> {
    let n = x.nrows();
    let scaled = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] * p[j]);
    DMatrix::identity(n, n) + scaled * x.transpose()
}

pub fn dense_solve(h: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    h.clone().cholesky().expect("positive definite").solve(b)
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

/// `Q = u cᵀ + c uᵀ`.
pub fn dense_q(u: &DVector<f64>, c: &DVector<f64>) -> DMatrix<f64> {
    u * c.transpose() + c * u.transpose()
}

/// `t Z c` with `Z = [I − R⁻¹M(MᵀR⁻¹M)⁻¹Mᵀ] R⁻¹`, every inverse dense.
pub fn dense_candidate(
    u: &DVector<f64>,
    c: &DVector<f64>,
    m: &DMatrix<f64>,
    lambda2: f64,
    t: f64,
) -> DVector<f64> {
    let n = u.len();
    let r = DMatrix::identity(n, n) * lambda2 + dense_q(u, c);
    let r_inv = r.try_inverse().expect("nonsingular resolvent");
    let rm = &r_inv * m;
    let inner = (m.transpose() * &rm)
        .try_inverse()
        .expect("nonsingular inner");
    let z = (DMatrix::identity(n, n) - &rm * inner * m.transpose()) * &r_inv;
    z * c * t
}

/// Uniform draw from `{x : Mᵀx = 0, xᵀx = n}`.
pub fn random_feasible(m: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let n = m.nrows();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    project_feasible(m, &z)
}

pub fn project_feasible(m: &DMatrix<f64>, z: &DVector<f64>) -> DVector<f64> {
    let gram = m.transpose() * m;
    let coef = gram
        .cholesky()
        .expect("full rank")
        .solve(&(m.transpose() * z));
    let p = z - m * coef;
    p.normalize() * (z.len() as f64).sqrt()
}

pub fn objective(u: &DVector<f64>, c: &DVector<f64>, x: &DVector<f64>, t: f64) -> f64 {
    -(x.dot(u) - t) * x.dot(c)
}

pub fn ones(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, 1, 1.0)
}
