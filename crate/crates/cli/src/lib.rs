//! Command-line front end for `sdae-core`.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when paths fail
//! or a problem check fails.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use sdae_core::experiment::{
    diagnostics, parse_report_csv, run_convergence, ConvergenceConfig, MeasureAt,
};
use sdae_core::inherent::integrate_inherent;
use sdae_core::linalg::identity_defects;
use sdae_core::paths::{BrownianLattice, Increments};
use sdae_core::problem::{
    check_initial_consistency, index1_jacobian_bound, jacobian_self_check, norm_bound_ratio,
    probe_assumptions,
};
use sdae_core::stepper::{stepsize_guard, GuardVerdict, IntegrationError};
use sdae_core::{builtin, integrate, NewtonConfig, SdaeProblem, ThetaConfig, Trajectory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sdae", version, about = "Stochastic theta methods for index-1 SDAEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo strong-error study over a stepsize ladder.
    Convergence(ConvergenceArgs),
    /// Integrate one path and write its trajectory.
    Simulate(SimulateArgs),
    /// Run structural and assumption checks on a builtin problem.
    Check(CheckArgs),
    /// Refit slopes from an existing convergence CSV.
    Fit(FitArgs),
    /// Moment curve and Hölder regression for one stepsize.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct ConvergenceArgs {
    #[arg(long)]
    pub problem: String,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.75,1.0")]
    pub thetas: Vec<f64>,
    #[arg(long, default_value_t = 13)]
    pub ref_level: u32,
    /// Inclusive ladder `a..b`, or a single level.
    #[arg(long, default_value = "6..11", value_parser = parse_levels)]
    pub levels: RangeInclusive<u32>,
    #[arg(long, default_value_t = 1000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "terminal")]
    pub measure: MeasureAt,
    #[arg(long)]
    pub newton_tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "SDAE_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub problem: String,
    #[arg(long, default_value_t = 1.0)]
    pub theta: f64,
    #[arg(long, default_value_t = 10)]
    pub level: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Path index, used as the generator stream.
    #[arg(long, default_value_t = 0)]
    pub path: u64,
    #[arg(long)]
    pub newton_tol: Option<f64>,
    /// Replace every Brownian increment by zero.
    #[arg(long)]
    pub no_noise: bool,
    /// Integrate the decoupled inherent SDE instead of the full system.
    #[arg(long)]
    pub inherent: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub problem: String,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub problem: String,
    #[arg(long, default_value_t = 1.0)]
    pub theta: f64,
    #[arg(long, default_value_t = 10)]
    pub level: u32,
    #[arg(long, default_value_t = 200)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Even moment order `p`.
    #[arg(long, default_value_t = 4)]
    pub moment: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "SDAE_WORKERS")]
    pub workers: Option<usize>,
}

fn parse_levels(s: &str) -> Result<RangeInclusive<u32>, String> {
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (a, b.strip_prefix('=').unwrap_or(b)),
        None => (s, s),
    };
    let lo: u32 = lo.trim().parse().map_err(|e| format!("bad level '{lo}': {e}"))?;
    let hi: u32 = hi.trim().parse().map_err(|e| format!("bad level '{hi}': {e}"))?;
    if lo > hi {
        return Err(format!("empty ladder {lo}..{hi}"));
    }
    Ok(lo..=hi)
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    let result = match cli.command {
        Command::Convergence(a) => cmd_convergence(a, out, err),
        Command::Simulate(a) => cmd_simulate(a, out, err),
        Command::Check(a) => cmd_check(a, out),
        Command::Fit(a) => cmd_fit(a, out),
        Command::Diagnose(a) => cmd_diagnose(a, out, err),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
    }
}

type CmdResult = Result<i32, String>;

fn load(label: &str) -> Result<SdaeProblem, String> {
    builtin(label).map_err(|e| e.to_string())
}

fn emit(path: Option<&Path>, out: &mut dyn Write, body: &[u8]) -> Result<(), String> {
    match path {
        Some(p) => fs::write(p, body).map_err(|e| format!("cannot write {}: {e}", p.display())),
        None => out.write_all(body).map_err(|e| e.to_string()),
    }
}

fn newton_config(tol: Option<f64>) -> Result<NewtonConfig, String> {
    match tol {
        None => Ok(NewtonConfig::default()),
        Some(t) if t > 0.0 && t.is_finite() => Ok(NewtonConfig::with_tol(t)),
        Some(t) => Err(format!("newton tolerance must be positive, got {t}")),
    }
}

fn cmd_convergence(a: ConvergenceArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    load(&a.problem)?;
    let mut cfg = ConvergenceConfig::new(a.problem, a.seed);
    cfg.thetas = a.thetas;
    cfg.ref_level = a.ref_level;
    cfg.coarse_levels = a.levels.collect();
    cfg.n_paths = a.paths;
    cfg.measure_at = a.measure;
    cfg.newton = newton_config(a.newton_tol)?;
    cfg.workers = a.workers;
    let report = run_convergence(&cfg).map_err(|e| e.to_string())?;
    emit(a.out.as_deref(), out, report.to_csv_string().as_bytes())?;
    for r in &report.results {
        let _ = writeln!(
            err,
            "theta {}: slope {:.4} (± {:.4}), failed {}, max constraint residual {:.3e}",
            r.theta,
            r.slope,
            r.slope_stderr,
            r.total_failed(),
            r.max_constraint_residual
        );
    }
    for note in &report.notes {
        let _ = writeln!(err, "note: {note}");
    }
    let _ = writeln!(err, "elapsed {:.1} s", report.elapsed.as_secs_f64());
    Ok(if report.any_failed() { EXIT_FAILED } else { EXIT_OK })
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let prob = load(&a.problem)?;
    let cfg = ThetaConfig::new(a.theta, 2f64.powi(-(a.level as i32)))
        .with_newton(newton_config(a.newton_tol)?);
    let increments = if a.no_noise {
        let steps = sdae_core::paths::steps_for_level(prob.horizon, a.level)
            .map_err(|e| e.to_string())?;
        Increments::zeros(prob.m, steps)
    } else {
        BrownianLattice::generate(a.seed, a.path, prob.m, a.level, prob.horizon)
            .map_err(|e| e.to_string())?
            .increments
    };
    let result = if a.inherent {
        integrate_inherent(&prob, &cfg, &increments)
    } else {
        integrate(&prob, &cfg, &increments)
    };
    let (traj, code): (Trajectory, i32) = match result {
        Ok(t) => (t, EXIT_OK),
        Err(IntegrationError::StepFailed { step, partial, source }) => {
            let _ = writeln!(err, "step {step} failed: {source}; writing partial trajectory");
            (*partial, EXIT_FAILED)
        }
        Err(e) => return Err(e.to_string()),
    };
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).map_err(|e| e.to_string())?;
    emit(a.out.as_deref(), out, &buf)?;
    Ok(code)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Warn,
    Fail,
}

impl Status {
    fn tag(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Warn => "WARN",
            Status::Fail => "FAIL",
        }
    }
}

struct CheckLog<'a> {
    out: &'a mut dyn Write,
    failures: usize,
    warnings: usize,
}

impl CheckLog<'_> {
    fn record(&mut self, status: Status, name: &str, detail: String) {
        match status {
            Status::Fail => self.failures += 1,
            Status::Warn => self.warnings += 1,
            Status::Pass => {}
        }
        let _ = writeln!(self.out, "{} {name}: {detail}", status.tag());
    }
}

const IDENTITY_TOL: f64 = 1e-10;
const JACOBIAN_TOL: f64 = 1e-6;
const CONSISTENCY_TOL: f64 = 1e-12;
const PROBE_RADIUS: f64 = 3.0;

fn cmd_check(a: CheckArgs, out: &mut dyn Write) -> CmdResult {
    let prob = load(&a.problem)?;
    Ok(check_problem(&prob, a.samples, a.seed, out))
}

/// Runs every check on `prob`, printing one line per check. Returns the
/// exit code: [`EXIT_FAILED`] if any check fails, warnings do not count.
pub fn check_problem(prob: &SdaeProblem, samples: usize, seed: u64, out: &mut dyn Write) -> i32 {
    let mut log = CheckLog {
        out,
        failures: 0,
        warnings: 0,
    };
    let samples = samples.max(1);

    let mut worst = 0.0f64;
    let mut ranks = Vec::new();
    let nodes = 50;
    for i in 0..nodes {
        let t = prob.horizon * i as f64 / (nodes - 1) as f64;
        match prob.bundle(t) {
            Ok(b) => {
                worst = worst.max(identity_defects(&b).max());
                if !ranks.contains(&b.rank) {
                    ranks.push(b.rank);
                }
            }
            Err(e) => {
                log.record(Status::Fail, "projectors", format!("t = {t}: {e}"));
                return EXIT_FAILED;
            }
        }
    }
    log.record(
        if worst <= IDENTITY_TOL { Status::Pass } else { Status::Fail },
        "pseudo-inverse and projector identities",
        format!("worst defect {worst:.2e} over {nodes} times"),
    );
    let declared = prob.constants.as_ref().map(|c| c.rank_r);
    let rank_ok = ranks.len() == 1 && declared.is_none_or(|r| ranks[0] == r);
    log.record(
        if rank_ok { Status::Pass } else { Status::Fail },
        "rank of A_t",
        format!("observed {ranks:?}, declared {declared:?}"),
    );

    if prob.has_analytic_jacobian() {
        let mismatch = jacobian_self_check(prob, samples, seed);
        log.record(
            if mismatch <= JACOBIAN_TOL { Status::Pass } else { Status::Fail },
            "jacobian vs finite differences",
            format!("worst relative mismatch {mismatch:.2e}"),
        );
    } else {
        log.record(
            Status::Pass,
            "jacobian vs finite differences",
            "no analytic jacobian; finite differences in use".into(),
        );
    }

    match check_initial_consistency(prob, CONSISTENCY_TOL) {
        Ok(c) => log.record(
            if c.passed { Status::Pass } else { Status::Fail },
            "initial consistency",
            format!("|R F(0, x0)| = {:.2e}", c.residual),
        ),
        Err(e) => log.record(Status::Fail, "initial consistency", e.to_string()),
    }

    match index1_jacobian_bound(prob, samples, seed) {
        Ok(bound) => {
            let declared = prob.constants.as_ref().map(|c| c.jacobian_bound_lj);
            let ok = bound.is_finite() && declared.is_none_or(|lj| bound <= lj * (1.0 + 1e-9));
            log.record(
                if ok { Status::Pass } else { Status::Fail },
                "index-1 jacobian bound",
                format!("sampled |J^-1| max {bound:.4}, declared {declared:?}"),
            );
        }
        Err(e) => log.record(Status::Fail, "index-1 jacobian bound", e.to_string()),
    }

    let Some(constants) = prob.constants.clone() else {
        log.record(Status::Warn, "assumption constants", "none declared".into());
        return finish(log);
    };

    match norm_bound_ratio(prob, nodes) {
        Ok(r) => log.record(
            if r <= 1.0 { Status::Pass } else { Status::Fail },
            "norm bounds on A_t and its pseudo-inverse",
            format!("worst observed/bound ratio {r:.4}"),
        ),
        Err(e) => log.record(Status::Fail, "norm bounds", e.to_string()),
    }

    let probe = probe_assumptions(prob, samples, PROBE_RADIUS, seed);
    let wide = probe_assumptions(prob, samples, 2.0 * PROBE_RADIUS, seed);
    match (probe, wide) {
        (Ok(p), Ok(w)) => {
            let l1 = constants.monotonicity_l1;
            log.record(
                if p.l1_estimate <= l1 * (1.0 + 1e-9) { Status::Pass } else { Status::Fail },
                "monotonicity probe",
                format!("sampled {:.4} <= declared L1 {l1} (p1 = {})", p.l1_estimate, p.p1_used),
            );
            match constants.coupling_l2 {
                Some(l2) => log.record(
                    if p.l2_estimate <= l2 * (1.0 + 1e-9) { Status::Pass } else { Status::Fail },
                    "coupling probe",
                    format!("sampled {:.4} <= declared L2 {l2} (p2 = {})", p.l2_estimate, p.p2_used),
                ),
                None if w.l2_estimate > 2.0 * p.l2_estimate.max(0.0) + 1.0 => log.record(
                    Status::Warn,
                    "coupling probe",
                    format!(
                        "unbounded: sampled {:.4} at radius {PROBE_RADIUS}, {:.4} at radius {}; \
                         the time-varying convergence theory does not apply{}",
                        p.l2_estimate,
                        w.l2_estimate,
                        2.0 * PROBE_RADIUS,
                        if constant_a(prob) { ", the constant-A theory does" } else { "" }
                    ),
                ),
                None => log.record(
                    Status::Pass,
                    "coupling probe",
                    format!("no constant declared; sampled {:.4}", p.l2_estimate),
                ),
            }
        }
        (Err(e), _) | (_, Err(e)) => log.record(Status::Fail, "assumption probes", e.to_string()),
    }

    for theta in [0.5, 0.75, 1.0] {
        let warned: Vec<u32> = (6..=13)
            .filter(|&l| {
                matches!(
                    stepsize_guard(&constants, theta, 2f64.powi(-(l as i32))),
                    GuardVerdict::Warning { .. }
                )
            })
            .collect();
        let bound = sdae_core::stepper::stepsize_bound(&constants, theta);
        if warned.is_empty() {
            log.record(
                Status::Pass,
                "stepsize guard",
                format!("theta {theta}: bound {bound:.4e}, levels 6..13 below it"),
            );
        } else {
            log.record(
                Status::Warn,
                "stepsize guard",
                format!("theta {theta}: bound {bound:.4e}, levels {warned:?} at or above it"),
            );
        }
    }
    finish(log)
}

fn constant_a(prob: &SdaeProblem) -> bool {
    (0..=10).all(|i| prob.a_dot(prob.horizon * i as f64 / 10.0).max_abs() == 0.0)
}

fn finish(log: CheckLog<'_>) -> i32 {
    let _ = writeln!(
        log.out,
        "{} failure(s), {} warning(s)",
        log.failures, log.warnings
    );
    if log.failures > 0 {
        EXIT_FAILED
    } else {
        EXIT_OK
    }
}

fn cmd_fit(a: FitArgs, out: &mut dyn Write) -> CmdResult {
    let text = fs::read_to_string(&a.input)
        .map_err(|e| format!("cannot read {}: {e}", a.input.display()))?;
    let parsed = parse_report_csv(&text).map_err(|e| e.to_string())?;
    let fits = parsed.refit().map_err(|e| e.to_string())?;
    for (theta, slope, intercept) in fits {
        writeln!(out, "theta={theta} slope={slope:.17e} intercept={intercept:.17e}")
            .map_err(|e| e.to_string())?;
    }
    Ok(EXIT_OK)
}

fn cmd_diagnose(a: DiagnoseArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let prob = load(&a.problem)?;
    let report = diagnostics(&prob, a.theta, a.level, a.paths, a.seed, a.moment, a.workers)
        .map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(|e| e.to_string())?;
    emit(a.out.as_deref(), out, &buf)?;
    let _ = writeln!(
        err,
        "holder slope {:.4}, max moment {:.4e}, failed {}",
        report.holder_slope,
        report.moments.iter().cloned().fold(0.0, f64::max),
        report.n_failed
    );
    Ok(if report.n_failed > 0 { EXIT_FAILED } else { EXIT_OK })
}

/// Entry point used by the binary.
pub fn main_with_stdio() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    let mut out = stdout.lock();
    let mut err = stderr.lock();
    run(std::env::args_os(), &mut out, &mut err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_ladders() {
        assert_eq!(parse_levels("6..11").unwrap(), 6..=11);
        assert_eq!(parse_levels("6..=11").unwrap(), 6..=11);
        assert_eq!(parse_levels("8").unwrap(), 8..=8);
        assert!(parse_levels("11..6").is_err());
        assert!(parse_levels("a..b").is_err());
    }

    #[test]
    fn defaults_mirror_the_study_protocol() {
        let cli = Cli::try_parse_from(["sdae", "convergence", "--problem", "example51"]).unwrap();
        let Command::Convergence(a) = cli.command else {
            panic!("wrong subcommand");
        };
        assert_eq!(a.thetas, vec![0.5, 0.75, 1.0]);
        assert_eq!(a.ref_level, 13);
        assert_eq!(a.levels, 6..=11);
        assert_eq!(a.paths, 1000);
        assert_eq!(a.measure, MeasureAt::Terminal);
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["sdae", "check", "--problem", "x", "--bogus"]).is_err());
    }
}
