//! Command-line front end.
//!
//! Exit codes: 0 success, 1 internal numerical failure, 2 malformed input,
//! 3 rank-deficient design, 4 no λ₂ root at any grid point, 5 too many
//! discarded replicates.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibrate::{
    calibrate_weights, standardize, CalibrationError, CalibrationResult, Priorities,
    StandardizedDesign,
};
use crate::lowrank::LowRankError;
use crate::sensitivity::{
    delta_bounded_extreme, solution_correlation, sweep_t, ExtremeVariable, SensitivityConfig,
    SensitivityContext, SensitivityError, SensitivityMode, SweepResult,
};
use crate::simgen::{
    draw_replicate_sample, gen_population, replicate_on_sample, run_replications_on, Population,
    PopulationSpec, ReplicationConfig, ReplicationSummary, SimError,
};

const EXIT_HELP: &str = "Exit codes: 0 ok, 1 internal numerical failure, 2 malformed input, \
3 rank-deficient design, 4 no lambda2 root found, 5 replicate discard rate above 10%";

#[derive(Debug, Parser)]
#[command(name = "relcal", version, about = "Relaxed calibration weighting with sensitivity analysis", after_help = EXIT_HELP)]
struct Cli {
    /// Print a complete configuration template and exit.
    #[arg(long)]
    emit_config_template: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Clone, Default, Args)]
struct Overrides {
    /// Master seed for simulations.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeSelection>,
    /// Largest plausible |t| of the new variable.
    #[arg(long, global = true)]
    t_max: Option<f64>,
    /// Largest plausible priority of the new variable.
    #[arg(long, global = true)]
    p_new: Option<f64>,
    /// Number of t grid points.
    #[arg(long, global = true)]
    grid: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate survey weights.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extreme plausible new auxiliary variable for a calibrated sample.
    Sensitivity {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory of a previous `calibrate` run, checked for consistency.
        #[arg(long)]
        calib_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replicated sampling, calibration and sensitivity on a synthetic population.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSelection {
    Orth,
    Centered,
    Both,
    DeltaBounded,
}

impl ModeSelection {
    fn modes(self) -> Vec<SensitivityMode> {
        match self {
            Self::Orth => vec![SensitivityMode::Orthogonal],
            Self::Centered => vec![SensitivityMode::Centered],
            Self::Both => vec![SensitivityMode::Orthogonal, SensitivityMode::Centered],
            Self::DeltaBounded => {
                vec![
                    SensitivityMode::DeltaBoundedOrthogonal,
                    SensitivityMode::DeltaBoundedCentered,
                ]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    /// Intercept first, then one per auxiliary column.
    pub priorities: Vec<f64>,
    pub r: f64,
    /// Population size, used when the targets file has no `intercept` row.
    pub population_size: Option<f64>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let base = ReplicationConfig::default();
        Self {
            priorities: base.priorities,
            r: base.r,
            population_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivitySection {
    pub p_new: f64,
    pub t_max: f64,
    pub t_grid_size: usize,
    pub modes: ModeSelection,
    pub delta_bound: f64,
    pub lambda_scan: usize,
    pub root_tol: f64,
    pub max_iter: usize,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        let base = SensitivityConfig::default();
        Self {
            p_new: base.p_new,
            t_max: base.t_max,
            t_grid_size: base.t_grid_size,
            modes: ModeSelection::Both,
            delta_bound: base.delta_bound,
            lambda_scan: base.lambda_scan,
            root_tol: base.root_tol,
            max_iter: base.max_iter,
        }
    }
}

impl SensitivitySection {
    fn config(&self, mode: SensitivityMode) -> SensitivityConfig {
        SensitivityConfig {
            p_new: self.p_new,
            t_max: self.t_max,
            t_grid_size: self.t_grid_size,
            mode,
            delta_bound: self.delta_bound,
            lambda_scan: self.lambda_scan,
            root_tol: self.root_tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub n_reps: usize,
    pub master_seed: u64,
    pub threads: usize,
    /// Zero-based population columns used for calibration; empty means all.
    pub calibration_columns: Vec<usize>,
    pub recovery_column: Option<usize>,
    pub sweep_t: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let base = ReplicationConfig::default();
        Self {
            n_reps: base.n_reps,
            master_seed: base.master_seed,
            threads: 1,
            calibration_columns: base.calibration_columns,
            recovery_column: base.recovery_column,
            sweep_t: base.sweep_t,
        }
    }
}

/// Single-sample sweeps written to `plotdata/`, evaluated on replicate 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PlotSection {
    pub t_sweep: bool,
    pub r_values: Vec<f64>,
    /// Common priority of the columns flagged important.
    pub p_important_values: Vec<f64>,
    /// Common priority of the remaining columns.
    pub p_unimportant_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub calibration: CalibrationSection,
    pub sensitivity: SensitivitySection,
    pub simulation: SimulationSection,
    pub population: Option<PopulationSpec>,
    pub plots: PlotSection,
}

impl ConfigFile {
    fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.simulation.master_seed = v;
        }
        if let Some(v) = o.threads {
            self.simulation.threads = v;
        }
        if let Some(v) = o.mode {
            self.sensitivity.modes = v;
        }
        if let Some(v) = o.t_max {
            self.sensitivity.t_max = v;
        }
        if let Some(v) = o.p_new {
            self.sensitivity.p_new = v;
        }
        if let Some(v) = o.grid {
            self.sensitivity.t_grid_size = v;
        }
    }

    fn template() -> Self {
        Self {
            population: Some(PopulationSpec::default()),
            plots: PlotSection {
                t_sweep: true,
                r_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                p_important_values: vec![0.03, 0.1, 0.3],
                p_unimportant_values: vec![0.003, 0.01, 0.03],
            },
            ..Default::default()
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(message: impl Display) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    fn internal(message: impl Display) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn column_label(names: &[String], j: usize) -> String {
    if j == 0 {
        "intercept".into()
    } else {
        names
            .get(j - 1)
            .cloned()
            .unwrap_or_else(|| format!("column {j}"))
    }
}

fn lowrank_error(e: &LowRankError, names: &[String]) -> CliError {
    match e {
        LowRankError::RankDeficient { columns } => {
            let named: Vec<String> = columns.iter().map(|&j| column_label(names, j)).collect();
            CliError {
                code: 3,
                message: format!(
                    "rank-deficient design; offending columns: {}",
                    named.join(", ")
                ),
            }
        }
        other => CliError::internal(other),
    }
}

fn calibration_error(e: CalibrationError, names: &[String]) -> CliError {
    match e {
        CalibrationError::LowRank(inner) => lowrank_error(&inner, names),
        CalibrationError::ZeroVariance(name) => CliError {
            code: 3,
            message: format!(
                "rank-deficient design; column {name} is constant and duplicates the intercept"
            ),
        },
        other => CliError::input(other),
    }
}

fn sensitivity_error(e: SensitivityError, names: &[String]) -> CliError {
    match e {
        SensitivityError::LowRank(inner) => lowrank_error(&inner, names),
        SensitivityError::InvalidConfig(m) => CliError::input(m),
        other => CliError::internal(other),
    }
}

fn read_config(path: &Path) -> CliResult<ConfigFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Survey sample as read from the data and targets files.
#[derive(Debug, Clone)]
pub struct SurveyData {
    pub unit_ids: Vec<String>,
    pub w: DVector<f64>,
    pub y: DVector<f64>,
    pub outcome: String,
    pub names: Vec<String>,
    pub raw: DMatrix<f64>,
    pub raw_targets: Vec<f64>,
    pub n_pop: f64,
}

fn parse_number(field: &str, path: &Path, line: u64, column: &str) -> CliResult<f64> {
    let v: f64 = field.trim().parse().map_err(|_| {
        CliError::input(format!(
            "{}:{line}: column {column}: cannot parse {field:?} as a number",
            path.display()
        ))
    })?;
    if !v.is_finite() {
        return Err(CliError::input(format!(
            "{}:{line}: column {column}: value is not finite",
            path.display()
        )));
    }
    Ok(v)
}

fn csv_reader(path: &Path) -> CliResult<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn read_survey(
    data: &Path,
    targets: &Path,
    population_size: Option<f64>,
) -> CliResult<SurveyData> {
    let mut rdr = csv_reader(data)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::input(format!("{}: {e}", data.display())))?
        .iter()
        .map(String::from)
        .collect();
    if header.len() < 4 || header[0] != "unit_id" || header[1] != "weight" {
        return Err(CliError::input(format!(
            "{}:1: header must be unit_id,weight,<outcome>,<auxiliary columns...>",
            data.display()
        )));
    }
    let outcome = header[2].clone();
    let names: Vec<String> = header[3..].to_vec();
    let k = names.len();
    let (mut ids, mut w, mut y, mut cells) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::input(format!("{}: {e}", data.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(CliError::input(format!(
                "{}:{line}: expected {} fields, found {}",
                data.display(),
                header.len(),
                rec.len()
            )));
        }
        ids.push(rec[0].to_string());
        let weight = parse_number(&rec[1], data, line, "weight")?;
        if !(weight > 0.0) {
            return Err(CliError::input(format!(
                "{}:{line}: weight must be positive",
                data.display()
            )));
        }
        w.push(weight);
        y.push(parse_number(&rec[2], data, line, &outcome)?);
        for (j, name) in names.iter().enumerate() {
            cells.push(parse_number(&rec[3 + j], data, line, name)?);
        }
    }
    let n = ids.len();
    if n == 0 {
        return Err(CliError::input(format!("{}: no data rows", data.display())));
    }
    let raw = DMatrix::from_row_slice(n, k, &cells);

    let mut rdr = csv_reader(targets)?;
    let theader: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::input(format!("{}: {e}", targets.display())))?
        .iter()
        .map(String::from)
        .collect();
    if theader.len() != 2 || theader[0] != "column_name" || theader[1] != "raw_target" {
        return Err(CliError::input(format!(
            "{}:1: header must be column_name,raw_target",
            targets.display()
        )));
    }
    let mut found: Vec<Option<f64>> = vec![None; k];
    let mut n_pop = population_size;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::input(format!("{}: {e}", targets.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(CliError::input(format!(
                "{}:{line}: expected 2 fields, found {}",
                targets.display(),
                rec.len()
            )));
        }
        let value = parse_number(&rec[1], targets, line, "raw_target")?;
        let name = &rec[0];
        if name == "intercept" {
            n_pop = Some(value);
            continue;
        }
        match names.iter().position(|c| c == name) {
            Some(j) if found[j].is_some() => {
                return Err(CliError::input(format!(
                    "{}:{line}: duplicate target for column {name}",
                    targets.display()
                )))
            }
            Some(j) => found[j] = Some(value),
            None => {
                return Err(CliError::input(format!(
                    "{}:{line}: target for column {name} which is not in the data",
                    targets.display()
                )))
            }
        }
    }
    let mut raw_targets = Vec::with_capacity(k);
    for (j, t) in found.into_iter().enumerate() {
        raw_targets.push(t.ok_or_else(|| {
            CliError::input(format!(
                "{}: no target for column {}",
                targets.display(),
                names[j]
            ))
        })?);
    }
    let n_pop = n_pop.ok_or_else(|| {
        CliError::input(format!(
            "{}: population size missing; add an intercept row or set calibration.population_size",
            targets.display()
        ))
    })?;
    Ok(SurveyData {
        unit_ids: ids,
        w: DVector::from_vec(w),
        y: DVector::from_vec(y),
        outcome,
        names,
        raw,
        raw_targets,
        n_pop,
    })
}

fn calibrate_survey(
    data: &SurveyData,
    cfg: &CalibrationSection,
) -> CliResult<(StandardizedDesign, Priorities, CalibrationResult)> {
    let design = standardize(&data.raw, &data.raw_targets, data.n_pop, &data.names)
        .map_err(|e| calibration_error(e, &data.names))?;
    if cfg.priorities.len() != data.names.len() + 1 {
        return Err(CliError::input(format!(
            "calibration.priorities has {} values; expected {} (intercept first)",
            cfg.priorities.len(),
            data.names.len() + 1
        )));
    }
    let prio = Priorities::new(cfg.priorities.clone(), cfg.r).map_err(CliError::input)?;
    let cal = calibrate_weights(&design, &data.w, &prio)
        .map_err(|e| calibration_error(e, &data.names))?;
    Ok((design, prio, cal))
}

fn f(v: f64) -> String {
    format!("{v}")
}

struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl CsvOut {
    fn create(dir: &Path, name: &str, header: &[&str]) -> CliResult<Self> {
        let path = dir.join(name);
        let mut writer = csv::Writer::from_path(&path)
            .map_err(|e| CliError::internal(format!("{}: {e}", path.display())))?;
        writer
            .write_record(header)
            .map_err(|e| CliError::internal(format!("{}: {e}", path.display())))?;
        Ok(Self { path, writer })
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> CliResult<()> {
        let fields: Vec<String> = fields.into_iter().collect();
        self.writer
            .write_record(&fields)
            .map_err(|e| CliError::internal(format!("{}: {e}", self.path.display())))
    }

    fn finish(mut self) -> CliResult<()> {
        self.writer
            .flush()
            .map_err(|e| CliError::internal(format!("{}: {e}", self.path.display())))
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::internal(format!("{}: {e}", dir.display())))
}

fn cmd_calibrate(data: &Path, targets: &Path, cfg: &ConfigFile, out: &Path) -> CliResult<()> {
    let survey = read_survey(data, targets, cfg.calibration.population_size)?;
    let (design, prio, cal) = calibrate_survey(&survey, &cfg.calibration)?;
    ensure_dir(out)?;

    let mut wf = CsvOut::create(
        out,
        "weights.csv",
        &["unit_id", "design_weight", "calibrated_weight"],
    )?;
    for (i, id) in survey.unit_ids.iter().enumerate() {
        wf.row([id.clone(), f(survey.w[i]), f(cal.u[i])])?;
    }
    wf.finish()?;

    let ht_est = design.x.tr_mul(&survey.w);
    let cal_est = design.x.tr_mul(&cal.u);
    let mut df = CsvOut::create(
        out,
        "discrepancies.csv",
        &[
            "variable",
            "ht_estimate",
            "calib_estimate",
            "target",
            "ht_error",
            "calib_error",
        ],
    )?;
    for j in 0..design.x.ncols() {
        let t = design.t[j];
        df.row([
            column_label(&survey.names, j),
            f(ht_est[j]),
            f(cal_est[j]),
            f(t),
            f(ht_est[j] - t),
            f(cal_est[j] - t),
        ])?;
    }
    df.finish()?;

    let mut ef = CsvOut::create(out, "estimate.csv", &["outcome", "ht", "calibrated"])?;
    ef.row([
        survey.outcome.clone(),
        f(survey.w.dot(&survey.y)),
        f(cal.u.dot(&survey.y)),
    ])?;
    ef.finish()?;

    println!(
        "calibrated n = {} units, K = {} auxiliary columns, R = {}; objective {:.6e}; negative weights {}",
        survey.unit_ids.len(),
        survey.names.len(),
        prio.r,
        cal.objective,
        cal.negative_weights
    );
    println!(
        "estimate of {} total: HT {:.1}, calibrated {:.1} (thousands)",
        survey.outcome,
        survey.w.dot(&survey.y) / 1000.0,
        cal.u.dot(&survey.y) / 1000.0
    );
    Ok(())
}

fn check_calibration_outputs(
    dir: &Path,
    survey: &SurveyData,
    cal: &CalibrationResult,
) -> CliResult<()> {
    let path = dir.join("weights.csv");
    let mut rdr = csv_reader(&path)?;
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(CliError::input(format!(
                "{}:{line}: expected 3 fields",
                path.display()
            )));
        }
        if i >= survey.unit_ids.len() || rec[0] != survey.unit_ids[i] {
            return Err(CliError::input(format!(
                "{}:{line}: unit_id does not match the data file",
                path.display()
            )));
        }
        let u = parse_number(&rec[2], &path, line, "calibrated_weight")?;
        if (u - cal.u[i]).abs() > 1e-9 * cal.u[i].abs().max(1.0) {
            return Err(CliError::input(format!(
                "{}:{line}: calibrated weight differs from recalibration with the given config",
                path.display()
            )));
        }
        rows += 1;
    }
    if rows != survey.unit_ids.len() {
        return Err(CliError::input(format!(
            "{}: {rows} rows, data has {}",
            path.display(),
            survey.unit_ids.len()
        )));
    }
    Ok(())
}

/// Outcome of one sensitivity mode for the CLI tables.
struct ModeRun {
    mode: SensitivityMode,
    sweep: Option<SweepResult>,
    best: Option<ExtremeVariable>,
}

fn run_modes(
    ctx: &SensitivityContext,
    section: &SensitivitySection,
    names: &[String],
) -> CliResult<Vec<ModeRun>> {
    let mut runs = Vec::new();
    for mode in section.modes.modes() {
        let cfg = section.config(mode);
        cfg.validate().map_err(|e| sensitivity_error(e, names))?;
        if matches!(
            mode,
            SensitivityMode::DeltaBoundedOrthogonal | SensitivityMode::DeltaBoundedCentered
        ) {
            let ev = delta_bounded_extreme(ctx, cfg.delta_bound, cfg.p_new, mode)
                .map_err(|e| sensitivity_error(e, names))?;
            runs.push(ModeRun {
                mode,
                sweep: None,
                best: Some(ev),
            });
        } else {
            let sweep = sweep_t(ctx, &cfg).map_err(|e| sensitivity_error(e, names))?;
            let best = sweep.maximum().cloned();
            runs.push(ModeRun {
                mode,
                sweep: Some(sweep),
                best,
            });
        }
    }
    Ok(runs)
}

fn cmd_sensitivity(
    data: &Path,
    targets: &Path,
    cfg: &ConfigFile,
    calib_dir: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let survey = read_survey(data, targets, cfg.calibration.population_size)?;
    let (design, _, cal) = calibrate_survey(&survey, &cfg.calibration)?;
    if let Some(dir) = calib_dir {
        check_calibration_outputs(dir, &survey, &cal)?;
    }
    let ctx = SensitivityContext::new(&design, &cal, &survey.y)
        .map_err(|e| sensitivity_error(e, &survey.names))?;
    let runs = run_modes(&ctx, &cfg.sensitivity, &survey.names)?;
    ensure_dir(out)?;

    let mut sf = CsvOut::create(
        out,
        "sensitivity.csv",
        &[
            "mode",
            "t",
            "lambda2",
            "delta_theta_exact",
            "delta_theta_approx",
            "objective",
            "n_roots",
            "converged",
            "running_max",
        ],
    )?;
    let mut all_failed = false;
    for run in &runs {
        match &run.sweep {
            Some(sweep) => {
                if sweep.points.iter().all(|p| p.extreme.is_none()) {
                    all_failed = true;
                }
                for p in &sweep.points {
                    let row = match &p.extreme {
                        Some(e) => [
                            f(e.lambda2),
                            f(e.delta_theta_exact),
                            f(e.delta_theta_approx),
                            f(e.objective),
                            e.all_roots.len().to_string(),
                            e.converged.to_string(),
                        ],
                        None => [
                            f(f64::NAN),
                            f(f64::NAN),
                            f(f64::NAN),
                            f(f64::NAN),
                            "0".into(),
                            "false".into(),
                        ],
                    };
                    let mut fields = vec![run.mode.name().to_string(), f(p.t)];
                    fields.extend(row);
                    fields.push(f(p.running_max));
                    sf.row(fields)?;
                }
            }
            None => {
                let e = run.best.as_ref().expect("delta-bounded result");
                sf.row([
                    run.mode.name().to_string(),
                    f(e.t_new),
                    f(e.lambda2),
                    f(e.delta_theta_exact),
                    f(e.delta_theta_approx),
                    f(e.objective),
                    "0".into(),
                    e.converged.to_string(),
                    f(e.delta_theta_exact.abs()),
                ])?;
            }
        }
    }
    sf.finish()?;

    let mut header = vec!["unit_id".to_string()];
    header.extend(runs.iter().map(|r| format!("x_{}", short_mode(r.mode))));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut xf = CsvOut::create(out, "extreme_x.csv", &header_refs)?;
    for (i, id) in survey.unit_ids.iter().enumerate() {
        let mut fields = vec![id.clone()];
        fields.extend(
            runs.iter()
                .map(|r| f(r.best.as_ref().map_or(f64::NAN, |e| e.x[i]))),
        );
        xf.row(fields)?;
    }
    xf.finish()?;

    let corr = match (
        runs.first().and_then(|r| r.best.as_ref()),
        runs.get(1).and_then(|r| r.best.as_ref()),
    ) {
        (Some(a), Some(b)) => solution_correlation(&a.x, &b.x).unwrap_or(f64::NAN),
        _ => f64::NAN,
    };
    let mut mf = CsvOut::create(
        out,
        "sensitivity_summary.csv",
        &[
            "mode",
            "max_abs_delta_theta",
            "argmax_t",
            "lambda2",
            "iterations",
            "converged",
            "corr_x_x0",
            "root_failures",
        ],
    )?;
    for run in &runs {
        let failures = run.sweep.as_ref().map_or(0, |s| s.failures);
        let row = match &run.best {
            Some(e) => [
                f(e.delta_theta_exact.abs()),
                f(e.t_new),
                f(e.lambda2),
                e.iterations.to_string(),
                e.converged.to_string(),
            ],
            None => [
                f(f64::NAN),
                f(f64::NAN),
                f(f64::NAN),
                "0".into(),
                "false".into(),
            ],
        };
        let mut fields = vec![run.mode.name().to_string()];
        fields.extend(row);
        fields.push(f(corr));
        fields.push(failures.to_string());
        mf.row(fields)?;
        if let Some(e) = &run.best {
            println!(
                "{:<26} max |change| {:.3} (thousands) at t = {}, lambda2 = {:.6}",
                run.mode.name(),
                e.delta_theta_exact.abs() / 1000.0,
                e.t_new,
                e.lambda2
            );
        }
    }
    mf.finish()?;
    if corr.is_finite() {
        println!("correlation of the two extreme variables: {corr:.3}");
    }
    if all_failed {
        return Err(CliError {
            code: 4,
            message: "no lambda2 root found at any t grid point; outputs are partial".into(),
        });
    }
    Ok(())
}

fn short_mode(mode: SensitivityMode) -> &'static str {
    match mode {
        SensitivityMode::Orthogonal => "orth",
        SensitivityMode::Centered => "centered",
        SensitivityMode::DeltaBoundedOrthogonal => "delta_orth",
        SensitivityMode::DeltaBoundedCentered => "delta_centered",
    }
}

fn replication_config(cfg: &ConfigFile) -> ReplicationConfig {
    ReplicationConfig {
        calibration_columns: cfg.simulation.calibration_columns.clone(),
        priorities: cfg.calibration.priorities.clone(),
        r: cfg.calibration.r,
        sensitivity: cfg.sensitivity.config(SensitivityMode::Orthogonal),
        n_reps: cfg.simulation.n_reps,
        master_seed: cfg.simulation.master_seed,
        recovery_column: cfg.simulation.recovery_column,
        sweep_t: cfg.simulation.sweep_t,
    }
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::InvalidParameter { .. } | SimError::UnsatisfiableScaling { .. } => {
            CliError::input(e)
        }
        SimError::Calibration(c) => calibration_error(c, &[]),
        other => CliError::internal(other),
    }
}

fn write_replicates(out: &Path, summary: &ReplicationSummary, seed: u64) -> CliResult<()> {
    let mut rf = CsvOut::create(
        out,
        "replicates.csv",
        &[
            "replicate",
            "seed",
            "stream",
            "realized_n",
            "ht_error",
            "calib_error",
            "delta_theta",
            "delta_theta0",
            "delta_theta_approx",
            "delta_theta0_approx",
            "corr",
            "recovery_orth",
            "recovery_centered",
            "discarded",
        ],
    )?;
    for r in &summary.records {
        let (ro, rc) = r.recovery.unwrap_or((f64::NAN, f64::NAN));
        rf.row([
            r.index.to_string(),
            seed.to_string(),
            (((r.index as u64) << 8) | r.attempt).to_string(),
            r.realized_n.to_string(),
            f(r.ht_error),
            f(r.calib_error),
            f(r.delta_theta),
            f(r.delta_theta0),
            f(r.delta_theta_approx),
            f(r.delta_theta0_approx),
            f(r.corr_x_x0),
            f(ro),
            f(rc),
            r.discarded().to_string(),
        ])?;
    }
    rf.finish()
}

fn write_summary(
    out: &Path,
    summary: &ReplicationSummary,
    rep: &ReplicationConfig,
    pop: &Population,
) -> CliResult<()> {
    let cols: Vec<usize> = if rep.calibration_columns.is_empty() {
        (0..pop.k()).collect()
    } else {
        rep.calibration_columns.clone()
    };
    let mut sf = CsvOut::create(
        out,
        "summary.csv",
        &["variable", "priority", "sd_delta", "sd_delta_ht"],
    )?;
    for j in 0..summary.sd_deltas.len() {
        let name = if j == 0 {
            "intercept".to_string()
        } else {
            pop.names[cols[j - 1]].clone()
        };
        sf.row([
            name,
            f(rep.priorities[j]),
            f(summary.sd_deltas[j]),
            f(summary.sd_ht_deltas[j]),
        ])?;
    }
    sf.finish()?;

    let mut af = CsvOut::create(out, "aggregates.csv", &["statistic", "value"])?;
    let mut stats = vec![
        ("replicates", summary.records.len() as f64),
        ("discarded", summary.discarded as f64),
        ("mean_delta_theta", summary.delta_theta.mean),
        ("sd_delta_theta", summary.delta_theta.sd),
        ("mean_delta_theta0", summary.delta_theta0.mean),
        ("sd_delta_theta0", summary.delta_theta0.sd),
        ("corr_delta_theta_delta_theta0", summary.corr_delta_theta),
        ("median_ratio", summary.median_ratio),
        ("mean_corr_x_x0", summary.corr_x_x0.mean),
        ("sd_corr_x_x0", summary.corr_x_x0.sd),
        ("mean_ht_error", summary.ht_error.mean),
        ("sd_ht_error", summary.ht_error.sd),
        ("mean_calib_error", summary.calib_error.mean),
        ("sd_calib_error", summary.calib_error.sd),
        ("population_total", pop.theta),
    ];
    if let Some((o, c)) = summary.recovery {
        stats.extend([
            ("mean_recovery_orth", o.mean),
            ("sd_recovery_orth", o.sd),
            ("mean_recovery_centered", c.mean),
            ("sd_recovery_centered", c.sd),
        ]);
    }
    for (name, v) in stats {
        af.row([name.to_string(), f(v)])?;
    }
    af.finish()
}

fn print_report(summary: &ReplicationSummary, pop: &Population) {
    let k = |v: f64| v / 1000.0;
    println!(
        "population N = {}, total {:.1} (thousands); outcomes clamped low/high {}/{}; probabilities clamped {}",
        pop.n_pop(),
        k(pop.theta),
        pop.truncation_counts.0,
        pop.truncation_counts.1,
        pop.pi_clamp_count
    );
    println!(
        "replicates kept {} of {}",
        summary.kept(),
        summary.records.len()
    );
    println!(
        "largest change, orthogonal: mean {:.3} (sd {:.3}); centered: mean {:.3} (sd {:.3}) (thousands)",
        k(summary.delta_theta.mean),
        k(summary.delta_theta.sd),
        k(summary.delta_theta0.mean),
        k(summary.delta_theta0.sd)
    );
    println!(
        "correlation of changes {:.3}; median ratio {:.2}; mean corr(x, x0) {:.3}",
        summary.corr_delta_theta, summary.median_ratio, summary.corr_x_x0.mean
    );
    println!(
        "estimation error sd: HT {:.1}, calibrated {:.2} (thousands)",
        k(summary.ht_error.sd),
        k(summary.calib_error.sd)
    );
    if let Some((o, c)) = summary.recovery {
        println!(
            "recovery correlation: orthogonal {:.3} ({:.3}), centered {:.3} ({:.3})",
            o.mean, o.sd, c.mean, c.sd
        );
    }
}

fn write_plotdata(
    out: &Path,
    pop: &Population,
    cfg: &ConfigFile,
    rep: &ReplicationConfig,
) -> CliResult<()> {
    let plots = &cfg.plots;
    if !plots.t_sweep
        && plots.r_values.is_empty()
        && plots.p_important_values.is_empty()
        && plots.p_unimportant_values.is_empty()
    {
        return Ok(());
    }
    let dir = out.join("plotdata");
    ensure_dir(&dir)?;
    let (sample, _) = draw_replicate_sample(pop, rep.master_seed, 0).map_err(sim_error)?;

    if plots.t_sweep {
        let cols: Vec<usize> = if rep.calibration_columns.is_empty() {
            (0..pop.k()).collect()
        } else {
            rep.calibration_columns.clone()
        };
        let raw = DMatrix::from_fn(sample.realized_n, cols.len(), |i, j| sample.x[(i, cols[j])]);
        let targets: Vec<f64> = cols.iter().map(|&c| pop.targets[c + 1]).collect();
        let names: Vec<String> = cols.iter().map(|&c| pop.names[c].clone()).collect();
        let design = standardize(&raw, &targets, pop.n_pop() as f64, &names)
            .map_err(|e| calibration_error(e, &names))?;
        let prio = Priorities::new(rep.priorities.clone(), rep.r).map_err(CliError::input)?;
        let cal = calibrate_weights(&design, &sample.w, &prio)
            .map_err(|e| calibration_error(e, &names))?;
        let ctx = SensitivityContext::new(&design, &cal, &sample.y)
            .map_err(|e| sensitivity_error(e, &names))?;
        let mut tf = CsvOut::create(
            &dir,
            "t_sweep.csv",
            &["mode", "t", "delta_theta", "running_max"],
        )?;
        for mode in [SensitivityMode::Orthogonal, SensitivityMode::Centered] {
            let sweep = sweep_t(&ctx, &cfg.sensitivity.config(mode))
                .map_err(|e| sensitivity_error(e, &names))?;
            for p in &sweep.points {
                let v = p
                    .extreme
                    .as_ref()
                    .map_or(f64::NAN, |e| e.delta_theta_exact.abs());
                tf.row([mode.name().to_string(), f(p.t), f(v), f(p.running_max)])?;
            }
        }
        tf.finish()?;
    }

    let header = [
        "parameter",
        "value",
        "delta_theta",
        "delta_theta0",
        "calib_error",
        "corr_x_x0",
    ];
    let emit = |file: &str,
                name: &str,
                values: &[f64],
                adjust: &dyn Fn(&mut ReplicationConfig, f64)|
     -> CliResult<()> {
        if values.is_empty() {
            return Ok(());
        }
        let mut pf = CsvOut::create(&dir, file, &header)?;
        for &v in values {
            let mut c = rep.clone();
            adjust(&mut c, v);
            c.validate(pop.k()).map_err(sim_error)?;
            let row = match replicate_on_sample(pop, &c, &sample) {
                Ok(r) => [
                    f(r.delta_theta),
                    f(r.delta_theta0),
                    f(r.calib_error),
                    f(r.corr_x_x0),
                ],
                Err(_) => [f(f64::NAN), f(f64::NAN), f(f64::NAN), f(f64::NAN)],
            };
            let mut fields = vec![name.to_string(), f(v)];
            fields.extend(row);
            pf.row(fields)?;
        }
        pf.finish()
    };
    emit("r_sweep.csv", "r", &plots.r_values, &|c, v| c.r = v)?;
    let cols: Vec<usize> = if rep.calibration_columns.is_empty() {
        (0..pop.k()).collect()
    } else {
        rep.calibration_columns.clone()
    };
    let important: Vec<bool> = cols
        .iter()
        .map(|&c| {
            cfg.population
                .as_ref()
                .and_then(|p| p.columns.get(c))
                .is_some_and(|col| col.important)
        })
        .collect();
    let set = |c: &mut ReplicationConfig, v: f64, flag: bool| {
        for (j, &imp) in important.iter().enumerate() {
            if imp == flag {
                c.priorities[j + 1] = v;
            }
        }
    };
    emit(
        "p_important_sweep.csv",
        "p_important",
        &plots.p_important_values,
        &|c, v| set(c, v, true),
    )?;
    emit(
        "p_unimportant_sweep.csv",
        "p_unimportant",
        &plots.p_unimportant_values,
        &|c, v| set(c, v, false),
    )?;
    Ok(())
}

fn cmd_simulate(cfg: &ConfigFile, out: &Path) -> CliResult<()> {
    let spec = cfg.population.clone().unwrap_or_default();
    let pop = gen_population(&spec).map_err(sim_error)?;
    let rep = replication_config(cfg);
    rep.validate(pop.k()).map_err(sim_error)?;
    ensure_dir(out)?;
    let (summary, discard_error) = match run_replications_on(&pop, &rep, cfg.simulation.threads) {
        Ok(s) => (s, None),
        Err(SimError::DiscardRate {
            discarded,
            total,
            summary,
        }) => (
            *summary,
            Some(CliError {
                code: 5,
                message: format!(
                    "{discarded} of {total} replicates discarded; outputs written for inspection"
                ),
            }),
        ),
        Err(e) => return Err(sim_error(e)),
    };
    write_replicates(out, &summary, rep.master_seed)?;
    write_summary(out, &summary, &rep, &pop)?;
    write_plotdata(out, &pop, cfg, &rep)?;
    print_report(&summary, &pop);
    match discard_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    if cli.emit_config_template {
        let text = toml::to_string_pretty(&ConfigFile::template()).map_err(CliError::internal)?;
        print!("{text}");
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::input("no subcommand given; see --help"));
    };
    match command {
        Command::Calibrate {
            data,
            targets,
            config,
            out,
        } => {
            let mut cfg = read_config(&config)?;
            cfg.apply(&cli.overrides);
            cmd_calibrate(&data, &targets, &cfg, &out)
        }
        Command::Sensitivity {
            data,
            targets,
            config,
            calib_dir,
            out,
        } => {
            let mut cfg = read_config(&config)?;
            cfg.apply(&cli.overrides);
            cmd_sensitivity(&data, &targets, &cfg, calib_dir.as_deref(), &out)
        }
        Command::Simulate { scenario, out } => {
            let mut cfg = read_config(&scenario)?;
            cfg.apply(&cli.overrides);
            cmd_simulate(&cfg, &out)
        }
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
