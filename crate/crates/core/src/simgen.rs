//! Synthetic populations, Poisson sampling and seeded replication of the
//! calibrate-then-sensitivity pipeline.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, ChiSquared, Distribution as _, Gamma, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{
    calibrate_weights, discrepancies, standardize, CalibrationError, Priorities,
};
use crate::sensitivity::{
    extreme_variable, solution_correlation, sweep_t, SensitivityConfig, SensitivityContext,
    SensitivityError, SensitivityMode,
};

/// Smallest admissible inclusion probability.
pub const PI_FLOOR: f64 = 1e-6;
/// Discarded replicates beyond this fraction abort a run.
pub const MAX_DISCARD_RATE: f64 = 0.10;
const MAX_EMPTY_RESAMPLES: u64 = 255;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid {what}: {detail}")]
    InvalidParameter { what: String, detail: String },
    #[error("expected sample size {expected} unreachable; at most {reachable} with all probabilities pinned")]
    UnsatisfiableScaling { expected: f64, reachable: f64 },
    #[error("sample was empty after {0} redraws")]
    EmptySample(u64),
    #[error("{discarded} of {total} replicates discarded (limit {:.0}%)", MAX_DISCARD_RATE * 100.0)]
    DiscardRate {
        discarded: usize,
        total: usize,
        summary: Box<ReplicationSummary>,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
}

fn invalid(what: &str, detail: impl Into<String>) -> SimError {
    SimError::InvalidParameter {
        what: what.to_string(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    Normal {
        mean: f64,
        sd: f64,
    },
    ChiSquared {
        df: f64,
    },
    /// `exp(N(mu, sigma²))`.
    LogNormal {
        mu: f64,
        sigma: f64,
    },
    Binary {
        p: f64,
    },
    Poisson {
        mean: f64,
    },
    Gamma {
        shape: f64,
        rate: f64,
    },
}

/// A validated sampler for one column.
enum Sampler {
    Normal(Normal<f64>),
    ChiSquared(ChiSquared<f64>),
    LogNormal(LogNormal<f64>),
    Binary(Bernoulli),
    Poisson(Poisson<f64>),
    Gamma(Gamma<f64>),
}

impl Sampler {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Normal(d) => d.sample(rng),
            Self::ChiSquared(d) => d.sample(rng),
            Self::LogNormal(d) => d.sample(rng),
            Self::Binary(d) => f64::from(u8::from(d.sample(rng))),
            Self::Poisson(d) => d.sample(rng),
            Self::Gamma(d) => d.sample(rng),
        }
    }
}

impl Distribution {
    fn sampler(&self) -> Result<Sampler, SimError> {
        let err = |e: &dyn std::fmt::Display| invalid("distribution", format!("{self:?}: {e}"));
        Ok(match *self {
            Self::Normal { mean, sd } => {
                Sampler::Normal(Normal::new(mean, sd).map_err(|e| err(&e))?)
            }
            Self::ChiSquared { df } => {
                Sampler::ChiSquared(ChiSquared::new(df).map_err(|e| err(&e))?)
            }
            Self::LogNormal { mu, sigma } => {
                Sampler::LogNormal(LogNormal::new(mu, sigma).map_err(|e| err(&e))?)
            }
            Self::Binary { p } => Sampler::Binary(Bernoulli::new(p).map_err(|e| err(&e))?),
            Self::Poisson { mean } => Sampler::Poisson(Poisson::new(mean).map_err(|e| err(&e))?),
            Self::Gamma { shape, rate } => {
                if !(rate > 0.0) {
                    return Err(err(&"rate must be positive"));
                }
                Sampler::Gamma(Gamma::new(shape, 1.0 / rate).map_err(|e| err(&e))?)
            }
        })
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Self::Normal { mean, .. } => mean,
            Self::ChiSquared { df } => df,
            Self::LogNormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            Self::Binary { p } => p,
            Self::Poisson { mean } => mean,
            Self::Gamma { shape, rate } => shape / rate,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Self::Normal { sd, .. } => sd * sd,
            Self::ChiSquared { df } => 2.0 * df,
            Self::LogNormal { mu, sigma } => {
                let s2 = sigma * sigma;
                (s2.exp() - 1.0) * (2.0 * mu + s2).exp()
            }
            Self::Binary { p } => p * (1.0 - p),
            Self::Poisson { mean } => mean,
            Self::Gamma { shape, rate } => shape / (rate * rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub distribution: Distribution,
    #[serde(default)]
    pub important: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub n_pop: usize,
    pub expected_sample: f64,
    /// Intercept first, then one coefficient per column.
    pub beta: Vec<f64>,
    pub sigma: f64,
    /// Outcomes are clamped into `[low, high]`; infinite limits disable it.
    pub y_limits: [f64; 2],
    /// Inclusion-probability coefficients, one per column.
    pub gamma: Vec<f64>,
    pub columns: Vec<ColumnSpec>,
    pub seed: u64,
}

impl Default for PopulationSpec {
    /// Twelve independent columns in important/unimportant pairs.
    fn default() -> Self {
        let kinds = [
            ("normal", Distribution::Normal { mean: 0.0, sd: 1.0 }),
            ("chisq4", Distribution::ChiSquared { df: 4.0 }),
            (
                "lognormal",
                Distribution::LogNormal {
                    mu: 0.0,
                    sigma: 1.0,
                },
            ),
            ("binary", Distribution::Binary { p: 0.12 }),
            ("poisson", Distribution::Poisson { mean: 2.5 }),
            (
                "gamma",
                Distribution::Gamma {
                    shape: 1.0,
                    rate: 5.0,
                },
            ),
        ];
        let mut columns = Vec::with_capacity(12);
        let mut beta = vec![1.0];
        for (name, distribution) in kinds {
            for important in [true, false] {
                let suffix = if important { "imp" } else { "unimp" };
                columns.push(ColumnSpec {
                    name: format!("{name}_{suffix}"),
                    distribution,
                    important,
                });
                beta.push(if important { 1.0 } else { 0.1 });
            }
        }
        let mut gamma = vec![0.0; 12];
        gamma[2] = 0.35;
        gamma[8] = 0.7;
        gamma[10] = 0.4;
        Self {
            n_pop: 120_000,
            expected_sample: 1000.0,
            beta,
            sigma: 0.4,
            y_limits: [0.0, 25.0],
            gamma,
            columns,
            seed: 20_250_101,
        }
    }
}

impl PopulationSpec {
    /// Three standard-normal columns, `y = x₁ + x₂ + x₃ + ε`, equal
    /// inclusion probabilities 0.04 and no outcome clamping.
    pub fn recovery(sigma2: f64, seed: u64) -> Self {
        let columns = (1..=3)
            .map(|j| ColumnSpec {
                name: format!("x{j}"),
                distribution: Distribution::Normal { mean: 0.0, sd: 1.0 },
                important: true,
            })
            .collect();
        Self {
            n_pop: 5000,
            expected_sample: 200.0,
            beta: vec![0.0, 1.0, 1.0, 1.0],
            sigma: sigma2.max(0.0).sqrt(),
            y_limits: [f64::NEG_INFINITY, f64::INFINITY],
            gamma: vec![0.0; 3],
            columns,
            seed,
        }
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let k = self.k();
        if k == 0 {
            return Err(invalid("columns", "at least one column is required"));
        }
        if self.beta.len() != k + 1 {
            return Err(invalid(
                "beta",
                format!("expected {} coefficients, got {}", k + 1, self.beta.len()),
            ));
        }
        if self.gamma.len() != k {
            return Err(invalid(
                "gamma",
                format!("expected {k} coefficients, got {}", self.gamma.len()),
            ));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(invalid("sigma", "must be finite and >= 0"));
        }
        if !(self.y_limits[0] < self.y_limits[1]) {
            return Err(invalid("y_limits", "low must be below high"));
        }
        if !(self.expected_sample > 0.0) || self.expected_sample > self.n_pop as f64 {
            return Err(invalid("expected_sample", "must lie in (0, n_pop]"));
        }
        if self.beta.iter().chain(&self.gamma).any(|v| !v.is_finite()) {
            return Err(invalid("coefficients", "must be finite"));
        }
        for c in &self.columns {
            c.distribution.sampler()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Population {
    /// `N × (K+1)` raw values, ones column first.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub pi: DVector<f64>,
    /// Raw column totals, `targets[0] = N`.
    pub targets: Vec<f64>,
    pub theta: f64,
    /// Outcomes clamped at the lower and upper limit.
    pub truncation_counts: (usize, usize),
    pub pi_clamp_count: usize,
    /// Scaling factor in `π = c(1 + Xγ)`.
    pub scale: f64,
    pub names: Vec<String>,
}

impl Population {
    pub fn n_pop(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.x.ncols() - 1
    }
}

pub fn gen_population(spec: &PopulationSpec) -> Result<Population, SimError> {
    spec.validate()?;
    let (n, k) = (spec.n_pop, spec.k());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = DMatrix::from_element(n, k + 1, 1.0);
    for (j, col) in spec.columns.iter().enumerate() {
        let sampler = col.distribution.sampler()?;
        for i in 0..n {
            x[(i, j + 1)] = sampler.draw(&mut rng);
        }
    }
    let beta = DVector::from_column_slice(&spec.beta);
    let mut y = &x * beta;
    if spec.sigma > 0.0 {
        let noise = Normal::new(0.0, spec.sigma).map_err(|e| invalid("sigma", e.to_string()))?;
        for v in y.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let [low, high] = spec.y_limits;
    let mut truncation = (0, 0);
    for v in y.iter_mut() {
        if *v < low {
            *v = low;
            truncation.0 += 1;
        } else if *v > high {
            *v = high;
            truncation.1 += 1;
        }
    }
    let gamma = DVector::from_column_slice(&spec.gamma);
    let linear = x.columns(1, k) * gamma;
    let linear = linear.add_scalar(1.0);
    let (scale, pi, pi_clamp_count) = scale_probabilities(&linear, spec.expected_sample)?;
    let targets = (0..=k).map(|j| x.column(j).sum()).collect();
    Ok(Population {
        theta: y.sum(),
        x,
        y,
        pi,
        targets,
        truncation_counts: truncation,
        pi_clamp_count,
        scale,
        names: spec.columns.iter().map(|c| c.name.clone()).collect(),
    })
}

fn clamp_pi(v: f64) -> f64 {
    v.clamp(PI_FLOOR, 1.0)
}

/// Bisection for `c` with `Σ clamp(c ℓᵢ) = E(n)`; the sum is nondecreasing in `c`.
fn scale_probabilities(
    linear: &DVector<f64>,
    expected: f64,
) -> Result<(f64, DVector<f64>, usize), SimError> {
    let total = |c: f64| linear.iter().map(|&l| clamp_pi(c * l)).sum::<f64>();
    let reachable = linear
        .iter()
        .map(|&l| if l > 0.0 { 1.0 } else { PI_FLOOR })
        .sum::<f64>();
    if reachable < expected * (1.0 - 1e-12) {
        return Err(SimError::UnsatisfiableScaling {
            expected,
            reachable,
        });
    }
    let positive_sum: f64 = linear.iter().filter(|&&l| l > 0.0).sum();
    let mut hi = if positive_sum > 0.0 {
        expected / positive_sum
    } else {
        1.0
    };
    while total(hi) < expected {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(SimError::UnsatisfiableScaling {
                expected,
                reachable,
            });
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) < expected {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = hi;
    let pi = linear.map(|l| clamp_pi(c * l));
    let clamped = linear
        .iter()
        .filter(|&&l| c * l < PI_FLOOR || c * l > 1.0)
        .count();
    Ok((c, pi, clamped))
}

#[derive(Debug, Clone)]
pub struct SampleDraw {
    pub indices: Vec<usize>,
    /// Raw auxiliary values of the selected units, without the ones column.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    pub realized_n: usize,
}

/// Independent Bernoulli(πᵢ) inclusion.
pub fn draw_sample<R: Rng + ?Sized>(pop: &Population, rng: &mut R) -> Result<SampleDraw, SimError> {
    let indices: Vec<usize> = pop
        .pi
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| (rng.random::<f64>() < p).then_some(i))
        .collect();
    if indices.is_empty() {
        return Err(SimError::EmptySample(0));
    }
    let k = pop.k();
    let n = indices.len();
    let x = DMatrix::from_fn(n, k, |r, j| pop.x[(indices[r], j + 1)]);
    let y = DVector::from_fn(n, |r, _| pop.y[indices[r]]);
    let w = DVector::from_fn(n, |r, _| 1.0 / pop.pi[indices[r]]);
    Ok(SampleDraw {
        indices,
        x,
        y,
        w,
        realized_n: n,
    })
}

/// Per-replicate generator: one ChaCha stream per (replicate, attempt).
pub fn replicate_rng(master_seed: u64, replicate: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((replicate as u64) << 8) | attempt);
    rng
}

/// Draws with successive substreams until the sample is nonempty.
pub fn draw_replicate_sample(
    pop: &Population,
    master_seed: u64,
    replicate: usize,
) -> Result<(SampleDraw, u64), SimError> {
    for attempt in 0..=MAX_EMPTY_RESAMPLES {
        let mut rng = replicate_rng(master_seed, replicate, attempt);
        match draw_sample(pop, &mut rng) {
            Ok(s) => return Ok((s, attempt)),
            Err(SimError::EmptySample(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(SimError::EmptySample(MAX_EMPTY_RESAMPLES + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplicationConfig {
    /// Zero-based column indices used for calibration; empty means all.
    pub calibration_columns: Vec<usize>,
    /// Intercept priority first, then one per calibration column.
    pub priorities: Vec<f64>,
    pub r: f64,
    pub sensitivity: SensitivityConfig,
    pub n_reps: usize,
    pub master_seed: u64,
    /// Column whose recovery by the extreme variable is measured.
    pub recovery_column: Option<usize>,
    /// Take the maximum over the `t` grid instead of evaluating at `t_max` only.
    pub sweep_t: bool,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        let mut priorities = vec![3.0];
        for _ in 0..6 {
            priorities.extend([0.1, 0.01]);
        }
        Self {
            calibration_columns: Vec::new(),
            priorities,
            r: 0.5,
            sensitivity: SensitivityConfig::default(),
            n_reps: 200,
            master_seed: 1,
            recovery_column: None,
            sweep_t: false,
        }
    }
}

impl ReplicationConfig {
    /// Calibration on `x₁, x₂` with priorities `(5, 0.1, 0.1)`, `p = 0.1`,
    /// `t = 210`, recovery of `x₃` measured.
    pub fn recovery(n_reps: usize, master_seed: u64) -> Self {
        Self {
            calibration_columns: vec![0, 1],
            priorities: vec![5.0, 0.1, 0.1],
            r: 0.5,
            sensitivity: SensitivityConfig {
                p_new: 0.1,
                t_max: 210.0,
                ..Default::default()
            },
            n_reps,
            master_seed,
            recovery_column: Some(2),
            sweep_t: false,
        }
    }

    fn columns(&self, k: usize) -> Vec<usize> {
        if self.calibration_columns.is_empty() {
            (0..k).collect()
        } else {
            self.calibration_columns.clone()
        }
    }

    pub fn validate(&self, k: usize) -> Result<(), SimError> {
        if self.n_reps == 0 {
            return Err(invalid("n_reps", "must be >= 1"));
        }
        let cols = self.columns(k);
        if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
            return Err(invalid(
                "calibration_columns",
                format!("column {bad} out of range (K = {k})"),
            ));
        }
        if self.priorities.len() != cols.len() + 1 {
            return Err(invalid(
                "priorities",
                format!(
                    "expected {} values (intercept first), got {}",
                    cols.len() + 1,
                    self.priorities.len()
                ),
            ));
        }
        if let Some(c) = self.recovery_column {
            if c >= k {
                return Err(invalid(
                    "recovery_column",
                    format!("column {c} out of range (K = {k})"),
                ));
            }
        }
        Priorities::new(self.priorities.clone(), self.r)?;
        self.sensitivity.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub index: usize,
    /// Substream attempts needed for a nonempty sample.
    pub attempt: u64,
    pub realized_n: usize,
    pub ht_error: f64,
    pub calib_error: f64,
    /// `|Δθ̂|` with orthogonality constraints.
    pub delta_theta: f64,
    /// `|Δθ̂|` with the centering constraint only.
    pub delta_theta0: f64,
    pub delta_theta_approx: f64,
    pub delta_theta0_approx: f64,
    pub corr_x_x0: f64,
    /// Correlations of the recovery column with the orthogonal and centered solutions.
    pub recovery: Option<(f64, f64)>,
    /// Calibrated discrepancies, intercept first (standardized scale).
    pub deltas: Vec<f64>,
    /// Discrepancies of the design weights.
    pub ht_deltas: Vec<f64>,
    pub failure: Option<String>,
}

impl ReplicationRecord {
    pub fn discarded(&self) -> bool {
        self.failure.is_some()
    }

    fn failed(index: usize, attempt: u64, realized_n: usize, reason: String) -> Self {
        Self {
            index,
            attempt,
            realized_n,
            ht_error: f64::NAN,
            calib_error: f64::NAN,
            delta_theta: f64::NAN,
            delta_theta0: f64::NAN,
            delta_theta_approx: f64::NAN,
            delta_theta0_approx: f64::NAN,
            corr_x_x0: f64::NAN,
            recovery: None,
            deltas: Vec::new(),
            ht_deltas: Vec::new(),
            failure: Some(reason),
        }
    }
}

/// Runs one replicate end to end.
pub fn run_replicate(pop: &Population, cfg: &ReplicationConfig, index: usize) -> ReplicationRecord {
    let (sample, attempt) = match draw_replicate_sample(pop, cfg.master_seed, index) {
        Ok(s) => s,
        Err(e) => return ReplicationRecord::failed(index, MAX_EMPTY_RESAMPLES, 0, e.to_string()),
    };
    match replicate_on_sample(pop, cfg, &sample) {
        Ok(mut rec) => {
            rec.index = index;
            rec.attempt = attempt;
            rec
        }
        Err(e) => ReplicationRecord::failed(index, attempt, sample.realized_n, e.to_string()),
    }
}

fn largest_change(
    ctx: &SensitivityContext,
    cfg: &SensitivityConfig,
    sweep: bool,
) -> Result<crate::sensitivity::ExtremeVariable, SimError> {
    if sweep {
        let result = sweep_t(ctx, cfg)?;
        if result.failures > 0 {
            return Err(SimError::Sensitivity(SensitivityError::InvalidConfig(
                format!("{} t grid points without a root", result.failures),
            )));
        }
        Ok(result.maximum().cloned().expect("nonempty sweep"))
    } else {
        Ok(extreme_variable(ctx, cfg.t_max, cfg)?)
    }
}

/// Calibration and both sensitivity modes on a given sample.
pub fn replicate_on_sample(
    pop: &Population,
    cfg: &ReplicationConfig,
    sample: &SampleDraw,
) -> Result<ReplicationRecord, SimError> {
    let cols = cfg.columns(pop.k());
    let raw = DMatrix::from_fn(sample.realized_n, cols.len(), |i, j| sample.x[(i, cols[j])]);
    let targets: Vec<f64> = cols.iter().map(|&c| pop.targets[c + 1]).collect();
    let names: Vec<String> = cols.iter().map(|&c| pop.names[c].clone()).collect();
    let design = standardize(&raw, &targets, pop.n_pop() as f64, &names)?;
    let prio = Priorities::new(cfg.priorities.clone(), cfg.r)?;
    let cal = calibrate_weights(&design, &sample.w, &prio)?;
    let ctx = SensitivityContext::new(&design, &cal, &sample.y)?;
    let orth = largest_change(
        &ctx,
        &cfg.sensitivity.with_mode(SensitivityMode::Orthogonal),
        cfg.sweep_t,
    )?;
    let cent = largest_change(
        &ctx,
        &cfg.sensitivity.with_mode(SensitivityMode::Centered),
        cfg.sweep_t,
    )?;
    let recovery = match cfg.recovery_column {
        Some(c) => {
            let omitted = sample.x.column(c).clone_owned();
            Some((
                solution_correlation(&orth.x, &omitted)?,
                solution_correlation(&cent.x, &omitted)?,
            ))
        }
        None => None,
    };
    Ok(ReplicationRecord {
        index: 0,
        attempt: 0,
        realized_n: sample.realized_n,
        ht_error: sample.w.dot(&sample.y) - pop.theta,
        calib_error: cal.u.dot(&sample.y) - pop.theta,
        delta_theta: orth.delta_theta_exact.abs(),
        delta_theta0: cent.delta_theta_exact.abs(),
        delta_theta_approx: orth.delta_theta_approx.abs(),
        delta_theta0_approx: cent.delta_theta_approx.abs(),
        corr_x_x0: solution_correlation(&orth.x, &cent.x)?,
        recovery,
        deltas: cal.deltas.iter().copied().collect(),
        ht_deltas: discrepancies(&design, &sample.w)?.iter().copied().collect(),
        failure: None,
    })
}

/// Mean and standard deviation (denominator `n − 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, sd }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationSummary {
    pub records: Vec<ReplicationRecord>,
    pub discarded: usize,
    pub delta_theta: MeanSd,
    pub delta_theta0: MeanSd,
    pub corr_delta_theta: f64,
    pub median_ratio: f64,
    pub corr_x_x0: MeanSd,
    pub recovery: Option<(MeanSd, MeanSd)>,
    /// Standard deviations of the calibrated discrepancies, intercept first.
    pub sd_deltas: Vec<f64>,
    pub sd_ht_deltas: Vec<f64>,
    pub ht_error: MeanSd,
    pub calib_error: MeanSd,
}

impl ReplicationSummary {
    /// Aggregates over the kept records in index order.
    pub fn from_records(records: Vec<ReplicationRecord>) -> Self {
        let kept: Vec<&ReplicationRecord> = records.iter().filter(|r| !r.discarded()).collect();
        let col =
            |f: &dyn Fn(&ReplicationRecord) -> f64| kept.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let dt = col(&|r| r.delta_theta);
        let dt0 = col(&|r| r.delta_theta0);
        let ratios = kept
            .iter()
            .map(|r| r.delta_theta0 / r.delta_theta)
            .collect();
        let width = kept.first().map_or(0, |r| r.deltas.len());
        let sd_of = |pick: &dyn Fn(&ReplicationRecord) -> &Vec<f64>| {
            (0..width)
                .map(|j| MeanSd::of(&kept.iter().map(|r| pick(r)[j]).collect::<Vec<_>>()).sd)
                .collect()
        };
        let recovery = if kept.iter().all(|r| r.recovery.is_some()) && !kept.is_empty() {
            Some((
                MeanSd::of(&col(&|r| r.recovery.unwrap().0)),
                MeanSd::of(&col(&|r| r.recovery.unwrap().1)),
            ))
        } else {
            None
        };
        Self {
            discarded: records.len() - kept.len(),
            delta_theta: MeanSd::of(&dt),
            delta_theta0: MeanSd::of(&dt0),
            corr_delta_theta: pearson(&dt, &dt0),
            median_ratio: median(ratios),
            corr_x_x0: MeanSd::of(&col(&|r| r.corr_x_x0)),
            recovery,
            sd_deltas: sd_of(&|r| &r.deltas),
            sd_ht_deltas: sd_of(&|r| &r.ht_deltas),
            ht_error: MeanSd::of(&col(&|r| r.ht_error)),
            calib_error: MeanSd::of(&col(&|r| r.calib_error)),
            records,
        }
    }

    pub fn kept(&self) -> usize {
        self.records.len() - self.discarded
    }
}

/// Replicates on a fixed population.  Output does not depend on `threads`.
pub fn run_replications_on(
    pop: &Population,
    cfg: &ReplicationConfig,
    threads: usize,
) -> Result<ReplicationSummary, SimError> {
    cfg.validate(pop.k())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| SimError::ThreadPool(e.to_string()))?;
    let records: Vec<ReplicationRecord> = pool.install(|| {
        (0..cfg.n_reps)
            .into_par_iter()
            .map(|r| run_replicate(pop, cfg, r))
            .collect()
    });
    let summary = ReplicationSummary::from_records(records);
    if summary.discarded as f64 > MAX_DISCARD_RATE * cfg.n_reps as f64 {
        return Err(SimError::DiscardRate {
            discarded: summary.discarded,
            total: cfg.n_reps,
            summary: Box::new(summary),
        });
    }
    Ok(summary)
}

pub fn run_replications(
    spec: &PopulationSpec,
    cfg: &ReplicationConfig,
    threads: usize,
) -> Result<(Population, ReplicationSummary), SimError> {
    let pop = gen_population(spec)?;
    let summary = run_replications_on(&pop, cfg, threads)?;
    Ok((pop, summary))
}
