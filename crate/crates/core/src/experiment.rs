//! Monte Carlo strong-error estimation and convergence-order fitting.
//!
//! Every path draws its Brownian increments once at the reference level;
//! coarse increments are exact dyadic sums of the same draws, so coarse and
//! reference solutions see the same Wiener path. Per-path work runs in
//! parallel, while reductions always walk paths in index order, so results
//! do not depend on the worker count.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::time::{Duration, SystemTime};

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{norm2, sub_vec};
use crate::newton::NewtonConfig;
use crate::paths::{BrownianLattice, Increments, PathError, GENERATOR_ID};
use crate::problem::{builtin, ProblemError, SdaeProblem};
use crate::stepper::{fmt_f64, IntegrationError, ThetaConfig, ThetaIntegrator, Trajectory};

pub const REPORT_HEADER: &str = "problem,theta,delta_exp,delta,rms,n_paths,n_failed,seed";
pub const DIAGNOSTICS_HEADER: &str = "problem,theta,p,t,moment,seed";

/// Number of contiguous path batches used for Monte Carlo standard errors.
const N_BATCHES: usize = 10;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("all {n_paths} paths failed for theta = {theta} at level {level}")]
    AllPathsFailed { theta: f64, level: u32, n_paths: usize },
    #[error("cannot fit slope: {0}")]
    Fit(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Where the pathwise error is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeasureAt {
    /// `|X_ref(T) − x_K|`.
    #[default]
    Terminal,
    /// `max_k |X_ref(t_k) − x_k|` over the coarse grid.
    MaxGrid,
}

impl FromStr for MeasureAt {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "terminal" => Ok(MeasureAt::Terminal),
            "max" | "max_grid" => Ok(MeasureAt::MaxGrid),
            other => Err(format!("unknown measure '{other}' (expected terminal or max)")),
        }
    }
}

impl fmt::Display for MeasureAt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeasureAt::Terminal => "terminal",
            MeasureAt::MaxGrid => "max_grid",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    pub problem_label: String,
    pub thetas: Vec<f64>,
    pub ref_level: u32,
    pub coarse_levels: Vec<u32>,
    pub n_paths: usize,
    pub seed: u64,
    pub measure_at: MeasureAt,
    pub newton: NewtonConfig,
    pub constraint_check_tol: f64,
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

impl ConvergenceConfig {
    /// Defaults: θ ∈ {½, ¾, 1}, reference level 13, levels 6..=11, 1000 paths.
    pub fn new(problem_label: impl Into<String>, seed: u64) -> Self {
        Self {
            problem_label: problem_label.into(),
            thetas: vec![0.5, 0.75, 1.0],
            ref_level: 13,
            coarse_levels: (6..=11).collect(),
            n_paths: 1000,
            seed,
            measure_at: MeasureAt::Terminal,
            newton: NewtonConfig::default(),
            constraint_check_tol: 1e-3,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.thetas.is_empty() {
            return bad("at least one theta is required".into());
        }
        if let Some(t) = self.thetas.iter().find(|t| !(0.5..=1.0).contains(*t)) {
            return bad(format!("theta {t} outside [1/2, 1]"));
        }
        if self.coarse_levels.is_empty() {
            return bad("at least one coarse level is required".into());
        }
        let max_level = *self.coarse_levels.iter().max().expect("non-empty");
        if self.ref_level <= max_level {
            return bad(format!(
                "reference level {} must exceed every coarse level (max {max_level})",
                self.ref_level
            ));
        }
        if self.ref_level > 24 {
            return bad(format!("reference level {} is too fine", self.ref_level));
        }
        if self.n_paths < 2 {
            return bad("need at least 2 paths".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelPoint {
    pub level: u32,
    pub delta: f64,
    pub rms: f64,
    pub n_paths: usize,
    pub n_failed: usize,
    /// Standard error of `rms` from batch means.
    pub rms_stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaResult {
    pub theta: f64,
    pub points: Vec<LevelPoint>,
    pub slope: f64,
    pub intercept: f64,
    /// Spread of batch-wise fitted slopes, as a standard error.
    pub slope_stderr: f64,
    /// Largest `‖R F(t_k, x_k)‖∞` over every accepted node of every trajectory.
    pub max_constraint_residual: f64,
    pub reference_failures: usize,
}

impl ThetaResult {
    pub fn total_failed(&self) -> usize {
        self.points.iter().map(|p| p.n_failed).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub problem: String,
    pub seed: u64,
    pub generator: &'static str,
    pub ref_level: u32,
    pub n_paths: usize,
    pub measure_at: MeasureAt,
    pub results: Vec<ThetaResult>,
    pub notes: Vec<String>,
    pub started_at: SystemTime,
    pub elapsed: Duration,
}

impl ConvergenceReport {
    pub fn any_failed(&self) -> bool {
        self.results.iter().any(|r| r.total_failed() > 0)
    }

    pub fn result(&self, theta: f64) -> Option<&ThetaResult> {
        self.results.iter().find(|r| r.theta == theta)
    }

    /// Writes the report CSV. Wall-clock metadata is not written.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        for r in &self.results {
            for p in &r.points {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    self.problem,
                    fmt_f64(r.theta),
                    p.level,
                    fmt_f64(p.delta),
                    fmt_f64(p.rms),
                    p.n_paths,
                    p.n_failed,
                    self.seed
                )?;
            }
        }
        for r in &self.results {
            writeln!(w, "#slope,{},{}", fmt_f64(r.theta), fmt_f64(r.slope))?;
            writeln!(w, "#intercept,{},{}", fmt_f64(r.theta), fmt_f64(r.intercept))?;
            writeln!(w, "#slope_stderr,{},{}", fmt_f64(r.theta), fmt_f64(r.slope_stderr))?;
            writeln!(
                w,
                "#max_constraint_residual,{},{}",
                fmt_f64(r.theta),
                fmt_f64(r.max_constraint_residual)
            )?;
        }
        writeln!(w, "#generator,{}", self.generator)?;
        writeln!(w, "#reference_level,{}", self.ref_level)?;
        writeln!(w, "#measure,{}", self.measure_at)?;
        for note in &self.notes {
            writeln!(w, "#note,{}", note.replace(',', ";"))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Ordinary least squares of `log₂(rms)` against `log₂(Δ)`; returns
/// `(slope, intercept)`.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<(f64, f64), ExperimentError> {
    if points.len() < 2 {
        return Err(ExperimentError::Fit("need at least two points".into()));
    }
    if let Some(&(d, r)) = points.iter().find(|(d, r)| !(*d > 0.0 && *r > 0.0)) {
        return Err(ExperimentError::Fit(format!(
            "stepsize and rms must be positive, got ({d}, {r})"
        )));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(d, _)| d.log2()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, r)| r.log2()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(ExperimentError::Fit("all stepsizes are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Squared pathwise errors for one `(θ, level)` pair, plus the constraint
/// monitor; `None` marks a failed path.
#[derive(Debug, Clone)]
struct PathOutcome {
    /// `[theta][level]`.
    sq_errors: Vec<Vec<Option<f64>>>,
    reference_failed: Vec<bool>,
    max_constraint: Vec<f64>,
}

struct ThetaIntegrators<'a> {
    reference: ThetaIntegrator<'a>,
    coarse: Vec<(u32, ThetaIntegrator<'a>)>,
}

fn build_integrators<'a>(
    prob: &'a SdaeProblem,
    theta: f64,
    ref_level: u32,
    levels: &[u32],
    newton: NewtonConfig,
    constraint_tol: f64,
) -> Result<ThetaIntegrators<'a>, ExperimentError> {
    let mk = |level: u32| {
        let cfg = ThetaConfig::new(theta, 2f64.powi(-(level as i32)))
            .with_newton(newton)
            .with_constraint_tol(constraint_tol);
        ThetaIntegrator::new(prob, cfg)
    };
    Ok(ThetaIntegrators {
        reference: mk(ref_level)?,
        coarse: levels
            .iter()
            .map(|&l| mk(l).map(|i| (l, i)))
            .collect::<Result<Vec<_>, _>>()?,
    })
}

fn path_error(
    reference: &Trajectory,
    coarse: &Trajectory,
    stride: usize,
    measure: MeasureAt,
) -> f64 {
    match measure {
        MeasureAt::Terminal => norm2(&sub_vec(reference.terminal(), coarse.terminal())),
        MeasureAt::MaxGrid => coarse
            .states
            .iter()
            .enumerate()
            .map(|(k, x)| norm2(&sub_vec(&reference.states[k * stride], x)))
            .fold(0.0, f64::max),
    }
}

fn simulate_path(
    prob: &SdaeProblem,
    integrators: &[ThetaIntegrators<'_>],
    ref_level: u32,
    seed: u64,
    path: usize,
    measure: MeasureAt,
) -> Result<PathOutcome, ExperimentError> {
    let lattice = BrownianLattice::generate(seed, path as u64, prob.m, ref_level, prob.horizon)?;
    let mut out = PathOutcome {
        sq_errors: Vec::with_capacity(integrators.len()),
        reference_failed: Vec::with_capacity(integrators.len()),
        max_constraint: Vec::with_capacity(integrators.len()),
    };
    let coarse_inc: Vec<Increments> = integrators[0]
        .coarse
        .iter()
        .map(|(l, _)| lattice.coarsen(*l))
        .collect::<Result<_, _>>()?;
    for ti in integrators {
        let mut worst = 0.0f64;
        let reference = match ti.reference.integrate(&lattice.increments) {
            Ok(tr) => {
                worst = worst.max(tr.max_constraint_residual());
                Some(tr)
            }
            Err(IntegrationError::StepFailed { partial, .. }) => {
                worst = worst.max(partial.max_constraint_residual());
                None
            }
            Err(e) => return Err(e.into()),
        };
        let mut errs = Vec::with_capacity(ti.coarse.len());
        for ((level, integ), inc) in ti.coarse.iter().zip(&coarse_inc) {
            let coarse = match integ.integrate(inc) {
                Ok(tr) => {
                    worst = worst.max(tr.max_constraint_residual());
                    Some(tr)
                }
                Err(IntegrationError::StepFailed { partial, .. }) => {
                    worst = worst.max(partial.max_constraint_residual());
                    None
                }
                Err(e) => return Err(e.into()),
            };
            let stride = 1usize << (ref_level - level);
            errs.push(match (&reference, coarse) {
                (Some(r), Some(c)) => Some(path_error(r, &c, stride, measure).powi(2)),
                _ => None,
            });
        }
        out.reference_failed.push(reference.is_none());
        out.sq_errors.push(errs);
        out.max_constraint.push(worst);
    }
    Ok(out)
}

fn with_pool<T: Send>(
    workers: Option<usize>,
    job: impl FnOnce() -> T + Send,
) -> Result<T, ExperimentError> {
    match workers {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| ExperimentError::Pool(e.to_string()))?;
            Ok(pool.install(job))
        }
    }
}

fn run_paths(
    prob: &SdaeProblem,
    integrators: &[ThetaIntegrators<'_>],
    ref_level: u32,
    n_paths: usize,
    seed: u64,
    measure: MeasureAt,
    workers: Option<usize>,
) -> Result<Vec<PathOutcome>, ExperimentError> {
    with_pool(workers, || {
        (0..n_paths)
            .into_par_iter()
            .map(|i| simulate_path(prob, integrators, ref_level, seed, i, measure))
            .collect::<Result<Vec<_>, _>>()
    })?
}

fn rms_of(sq: impl Iterator<Item = Option<f64>>) -> (f64, usize, usize) {
    let mut sum = 0.0;
    let mut ok = 0;
    let mut failed = 0;
    for e in sq {
        match e {
            Some(v) => {
                sum += v;
                ok += 1;
            }
            None => failed += 1,
        }
    }
    let rms = if ok > 0 { (sum / ok as f64).sqrt() } else { f64::NAN };
    (rms, ok, failed)
}

fn batch_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    let b = N_BATCHES.min(n);
    (0..b).map(|i| (i * n / b)..((i + 1) * n / b)).collect()
}

fn stderr_of(values: &[f64]) -> f64 {
    let vals: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if vals.len() < 2 {
        return f64::NAN;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Strong error of one θ at one level against the reference level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongError {
    pub rms: f64,
    pub n_failed: usize,
}

pub fn strong_error(
    prob: &SdaeProblem,
    theta: f64,
    level: u32,
    ref_level: u32,
    n_paths: usize,
    seed: u64,
) -> Result<StrongError, ExperimentError> {
    strong_error_with(prob, theta, level, ref_level, n_paths, seed, MeasureAt::Terminal, None)
}

#[allow(clippy::too_many_arguments)]
pub fn strong_error_with(
    prob: &SdaeProblem,
    theta: f64,
    level: u32,
    ref_level: u32,
    n_paths: usize,
    seed: u64,
    measure: MeasureAt,
    workers: Option<usize>,
) -> Result<StrongError, ExperimentError> {
    if level >= ref_level {
        return Err(ExperimentError::Config(format!(
            "level {level} must be coarser than the reference level {ref_level}"
        )));
    }
    if n_paths == 0 {
        return Err(ExperimentError::Config("need at least one path".into()));
    }
    let integrators = [build_integrators(
        prob,
        theta,
        ref_level,
        &[level],
        NewtonConfig::default(),
        1e-3,
    )?];
    let outcomes = run_paths(prob, &integrators, ref_level, n_paths, seed, measure, workers)?;
    let (rms, ok, failed) = rms_of(outcomes.iter().map(|o| o.sq_errors[0][0]));
    if ok == 0 {
        return Err(ExperimentError::AllPathsFailed {
            theta,
            level,
            n_paths,
        });
    }
    Ok(StrongError {
        rms,
        n_failed: failed,
    })
}

/// Full θ × level sweep. All θ share the same Brownian paths.
pub fn run_convergence(cfg: &ConvergenceConfig) -> Result<ConvergenceReport, ExperimentError> {
    cfg.validate()?;
    let prob = builtin(&cfg.problem_label)?;
    run_convergence_for(&prob, cfg)
}

/// As [`run_convergence`] but for an arbitrary problem; `cfg.problem_label`
/// is only used as the report label.
pub fn run_convergence_for(
    prob: &SdaeProblem,
    cfg: &ConvergenceConfig,
) -> Result<ConvergenceReport, ExperimentError> {
    cfg.validate()?;
    let started_at = SystemTime::now();
    let clock = std::time::Instant::now();
    let mut levels = cfg.coarse_levels.clone();
    levels.sort_unstable();
    levels.dedup();

    let integrators = cfg
        .thetas
        .iter()
        .map(|&theta| {
            build_integrators(
                prob,
                theta,
                cfg.ref_level,
                &levels,
                cfg.newton,
                cfg.constraint_check_tol,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let outcomes = run_paths(
        prob,
        &integrators,
        cfg.ref_level,
        cfg.n_paths,
        cfg.seed,
        cfg.measure_at,
        cfg.workers,
    )?;

    let batches = batch_ranges(cfg.n_paths);
    let mut results = Vec::with_capacity(cfg.thetas.len());
    let mut notes = Vec::new();
    for (ti, &theta) in cfg.thetas.iter().enumerate() {
        let mut points = Vec::with_capacity(levels.len());
        let mut batch_rms: Vec<Vec<f64>> = vec![Vec::with_capacity(levels.len()); batches.len()];
        for (li, &level) in levels.iter().enumerate() {
            let (rms, ok, failed) = rms_of(outcomes.iter().map(|o| o.sq_errors[ti][li]));
            if ok == 0 {
                return Err(ExperimentError::AllPathsFailed {
                    theta,
                    level,
                    n_paths: cfg.n_paths,
                });
            }
            let per_batch: Vec<f64> = batches
                .iter()
                .map(|r| rms_of(outcomes[r.clone()].iter().map(|o| o.sq_errors[ti][li])).0)
                .collect();
            for (b, v) in per_batch.iter().enumerate() {
                batch_rms[b].push(*v);
            }
            points.push(LevelPoint {
                level,
                delta: 2f64.powi(-(level as i32)),
                rms,
                n_paths: cfg.n_paths,
                n_failed: failed,
                rms_stderr: stderr_of(&per_batch),
            });
        }
        let (slope, intercept) = if points.len() >= 2 {
            fit_slope(&points.iter().map(|p| (p.delta, p.rms)).collect::<Vec<_>>())?
        } else {
            (f64::NAN, f64::NAN)
        };
        let batch_slopes: Vec<f64> = batch_rms
            .iter()
            .map(|rms| {
                let pts: Vec<(f64, f64)> =
                    points.iter().zip(rms).map(|(p, &r)| (p.delta, r)).collect();
                fit_slope(&pts).map_or(f64::NAN, |(s, _)| s)
            })
            .collect();
        let result = ThetaResult {
            theta,
            slope,
            intercept,
            slope_stderr: stderr_of(&batch_slopes),
            max_constraint_residual: outcomes
                .iter()
                .map(|o| o.max_constraint[ti])
                .fold(0.0, f64::max),
            reference_failures: outcomes.iter().filter(|o| o.reference_failed[ti]).count(),
            points,
        };
        if result.total_failed() > 0 {
            notes.push(format!(
                "theta {theta}: {} failed (path; level) pairs excluded from rms",
                result.total_failed()
            ));
        }
        if slope.is_finite() && slope > 0.75 {
            notes.push(format!(
                "theta {theta}: observed order {slope:.4} exceeds the proven mean-square order 1/2"
            ));
        }
        results.push(result);
    }
    Ok(ConvergenceReport {
        problem: cfg.problem_label.clone(),
        seed: cfg.seed,
        generator: GENERATOR_ID,
        ref_level: cfg.ref_level,
        n_paths: cfg.n_paths,
        measure_at: cfg.measure_at,
        results,
        notes,
        started_at,
        elapsed: clock.elapsed(),
    })
}

/// One data row of a report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub problem: String,
    pub theta: f64,
    pub delta_exp: u32,
    pub delta: f64,
    pub rms: f64,
    pub n_paths: usize,
    pub n_failed: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedReport {
    pub rows: Vec<ReportRow>,
    /// `(theta, slope)` from `#slope` rows.
    pub slopes: Vec<(f64, f64)>,
    pub intercepts: Vec<(f64, f64)>,
}

impl ParsedReport {
    /// Distinct θ values in order of first appearance.
    pub fn thetas(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.theta) {
                out.push(r.theta);
            }
        }
        out
    }

    /// Refits slope and intercept per θ from the data rows.
    pub fn refit(&self) -> Result<Vec<(f64, f64, f64)>, ExperimentError> {
        self.thetas()
            .into_iter()
            .map(|theta| {
                let pts: Vec<(f64, f64)> = self
                    .rows
                    .iter()
                    .filter(|r| r.theta == theta)
                    .map(|r| (r.delta, r.rms))
                    .collect();
                fit_slope(&pts).map(|(s, i)| (theta, s, i))
            })
            .collect()
    }
}

pub fn parse_report_csv(text: &str) -> Result<ParsedReport, ExperimentError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == REPORT_HEADER => {}
        Some((_, h)) => {
            return Err(ExperimentError::Parse {
                line: 1,
                msg: format!("unexpected header '{h}'"),
            })
        }
        None => {
            return Err(ExperimentError::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    }
    let mut out = ParsedReport::default();
    for (idx, raw) in lines {
        let line = idx + 1;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        let err = |msg: String| ExperimentError::Parse { line, msg };
        let fields: Vec<&str> = l.split(',').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("bad number '{s}': {e}")));
        if let Some(tag) = fields[0].strip_prefix('#') {
            match tag {
                "slope" | "intercept" => {
                    if fields.len() != 3 {
                        return Err(err(format!("expected 3 fields in #{tag} row")));
                    }
                    let pair = (num(fields[1])?, num(fields[2])?);
                    if tag == "slope" {
                        out.slopes.push(pair);
                    } else {
                        out.intercepts.push(pair);
                    }
                }
                _ => {}
            }
            continue;
        }
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|e| err(format!("bad integer '{s}': {e}")));
        out.rows.push(ReportRow {
            problem: fields[0].to_string(),
            theta: num(fields[1])?,
            delta_exp: int(fields[2])? as u32,
            delta: num(fields[3])?,
            rms: num(fields[4])?,
            n_paths: int(fields[5])? as usize,
            n_failed: int(fields[6])? as usize,
            seed: int(fields[7])?,
        });
    }
    if out.rows.is_empty() {
        return Err(ExperimentError::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    Ok(out)
}

/// Empirical moment curve and Hölder regression for one θ and level.
#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub problem: String,
    pub theta: f64,
    pub level: u32,
    pub p: u32,
    pub seed: u64,
    pub times: Vec<f64>,
    /// `Ê|X_t|^p` at each node.
    pub moments: Vec<f64>,
    /// `(lag, Ê|X_{t+lag} − X_t|²)` for lags `Δ, 2Δ, 4Δ, 8Δ`.
    pub increments: Vec<(f64, f64)>,
    pub holder_slope: f64,
    pub n_failed: usize,
}

impl DiagnosticsReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{DIAGNOSTICS_HEADER}")?;
        for (t, m) in self.times.iter().zip(&self.moments) {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.problem,
                fmt_f64(self.theta),
                self.p,
                fmt_f64(*t),
                fmt_f64(*m),
                self.seed
            )?;
        }
        for (lag, v) in &self.increments {
            writeln!(w, "#holder_lag,{},{}", fmt_f64(*lag), fmt_f64(*v))?;
        }
        writeln!(w, "#holder_slope,{},{}", fmt_f64(self.theta), fmt_f64(self.holder_slope))?;
        writeln!(w, "#n_failed,{},{}", fmt_f64(self.theta), self.n_failed)?;
        Ok(())
    }
}

pub const HOLDER_LAGS: [usize; 4] = [1, 2, 4, 8];

#[allow(clippy::too_many_arguments)]
pub fn diagnostics(
    prob: &SdaeProblem,
    theta: f64,
    level: u32,
    n_paths: usize,
    seed: u64,
    p: u32,
    workers: Option<usize>,
) -> Result<DiagnosticsReport, ExperimentError> {
    if p < 2 || !p.is_multiple_of(2) {
        return Err(ExperimentError::Config(format!("moment order {p} must be even and >= 2")));
    }
    if let Some(c) = &prob.constants {
        if f64::from(p) >= c.p1 {
            return Err(ExperimentError::Config(format!(
                "moment order {p} must be below p1 = {}",
                c.p1
            )));
        }
    }
    if n_paths == 0 {
        return Err(ExperimentError::Config("need at least one path".into()));
    }
    let integ = ThetaIntegrator::new(prob, ThetaConfig::new(theta, 2f64.powi(-(level as i32))))?;
    let steps = integ.steps();
    let max_lag = *HOLDER_LAGS.last().expect("non-empty");
    if steps <= max_lag {
        return Err(ExperimentError::Config(format!(
            "level {level} has too few steps for lag {max_lag}"
        )));
    }

    struct PathStats {
        moments: Vec<f64>,
        lag_sums: Vec<f64>,
    }
    let per_path = with_pool(workers, || {
        (0..n_paths)
            .into_par_iter()
            .map(|i| -> Result<Option<PathStats>, ExperimentError> {
                let lat = BrownianLattice::generate(seed, i as u64, prob.m, level, prob.horizon)?;
                let traj = match integ.integrate(&lat.increments) {
                    Ok(t) => t,
                    Err(IntegrationError::StepFailed { .. }) => return Ok(None),
                    Err(e) => return Err(e.into()),
                };
                let moments = traj
                    .states
                    .iter()
                    .map(|x| norm2(x).powi(p as i32))
                    .collect();
                let lag_sums = HOLDER_LAGS
                    .iter()
                    .map(|&lag| {
                        (0..=steps - lag)
                            .map(|k| norm2(&sub_vec(&traj.states[k + lag], &traj.states[k])).powi(2))
                            .sum::<f64>()
                            / (steps + 1 - lag) as f64
                    })
                    .collect();
                Ok(Some(PathStats { moments, lag_sums }))
            })
            .collect::<Result<Vec<_>, _>>()
    })??;

    let ok: Vec<&PathStats> = per_path.iter().flatten().collect();
    if ok.is_empty() {
        return Err(ExperimentError::AllPathsFailed {
            theta,
            level,
            n_paths,
        });
    }
    let n_ok = ok.len() as f64;
    let moments: Vec<f64> = (0..=steps)
        .map(|k| ok.iter().map(|s| s.moments[k]).sum::<f64>() / n_ok)
        .collect();
    let delta = integ.config().delta;
    let increments: Vec<(f64, f64)> = HOLDER_LAGS
        .iter()
        .enumerate()
        .map(|(j, &lag)| {
            (
                lag as f64 * delta,
                ok.iter().map(|s| s.lag_sums[j]).sum::<f64>() / n_ok,
            )
        })
        .collect();
    let holder_slope = fit_slope(&increments).map_or(f64::NAN, |(s, _)| s);
    Ok(DiagnosticsReport {
        problem: prob.label.clone(),
        theta,
        level,
        p,
        seed,
        times: (0..=steps).map(|k| integ.time(k)).collect(),
        moments,
        increments,
        holder_slope,
        n_failed: n_paths - ok.len(),
    })
}

/// Largest constraint residual over `n_paths` trajectories at one level.
pub fn constraint_sweep(
    prob: &SdaeProblem,
    cfg: ThetaConfig,
    level: u32,
    n_paths: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<(f64, usize), ExperimentError> {
    let integ = ThetaIntegrator::new(prob, cfg)?;
    let per_path = with_pool(workers, || {
        (0..n_paths)
            .into_par_iter()
            .map(|i| -> Result<Option<f64>, ExperimentError> {
                let lat = BrownianLattice::generate(seed, i as u64, prob.m, level, prob.horizon)?;
                match integ.integrate(&lat.increments) {
                    Ok(t) => Ok(Some(t.max_constraint_residual())),
                    Err(IntegrationError::StepFailed { .. }) => Ok(None),
                    Err(e) => Err(e.into()),
                }
            })
            .collect::<Result<Vec<_>, _>>()
    })??;
    let failed = per_path.iter().filter(|v| v.is_none()).count();
    let worst = per_path.iter().flatten().fold(0.0, |m: f64, v| m.max(*v));
    Ok((worst, failed))
}
