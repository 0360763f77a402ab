//! The stochastic theta method for index-1 SDAEs.
//!
//! One step solves
//!
//! ```text
//! A(t_{k+1}) x_{k+1} − θΔ F(t_{k+1}, x_{k+1})
//!     = A(t_k) x_k + (1 − θ)Δ F(t_k, x_k) + G(t_k, x_k) ΔW_k
//! ```
//!
//! for `x_{k+1}` with damped Newton. By default Newton works on the
//! left-scaled system `D·H(x) = 0` with `D = AA⁻ − R/(θΔ)`, which has the
//! same root and the Jacobian `A + R F'_x − θΔ AA⁻F'_x`.

use std::io::{self, Write};

use thiserror::Error;

use crate::linalg::{norm_inf, Matrix, ProjectorBundle};
use crate::newton::{newton_solve, NewtonConfig, NewtonFailure};
use crate::paths::Increments;
use crate::problem::{constraint_residual_with, ProblemConstants, ProblemError, SdaeProblem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaConfig {
    pub theta: f64,
    pub delta: f64,
    pub newton: NewtonConfig,
    /// Solve the `D`-scaled system instead of the raw one.
    pub precondition: bool,
    /// Largest accepted `‖R F(t, x)‖∞` at a computed node.
    pub constraint_check_tol: f64,
}

impl ThetaConfig {
    pub fn new(theta: f64, delta: f64) -> Self {
        Self {
            theta,
            delta,
            newton: NewtonConfig::default(),
            precondition: true,
            constraint_check_tol: 1e-3,
        }
    }

    pub fn with_newton(mut self, newton: NewtonConfig) -> Self {
        self.newton = newton;
        self
    }

    pub fn with_precondition(mut self, on: bool) -> Self {
        self.precondition = on;
        self
    }

    pub fn with_constraint_tol(mut self, tol: f64) -> Self {
        self.constraint_check_tol = tol;
        self
    }

    fn validate(&self, horizon: f64) -> Result<usize, StepError> {
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(StepError::Config(format!(
                "theta must lie in [1/2, 1], got {}",
                self.theta
            )));
        }
        if !(self.delta > 0.0 && self.delta <= horizon) {
            return Err(StepError::Config(format!(
                "stepsize must lie in (0, T], got {}",
                self.delta
            )));
        }
        if !self.newton.is_valid() || !(self.constraint_check_tol > 0.0) {
            return Err(StepError::Config("invalid solver tolerances".into()));
        }
        let steps = horizon / self.delta;
        let rounded = steps.round();
        if (steps - rounded).abs() > 1e-9 * rounded {
            return Err(StepError::Config(format!(
                "horizon {horizon} is not a multiple of the stepsize {}",
                self.delta
            )));
        }
        Ok(rounded as usize)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("Newton did not converge at t = {t} after {iterations} iterations (residual {residual:e}): {failure:?}")]
    Newton {
        t: f64,
        iterations: usize,
        residual: f64,
        failure: NewtonFailure,
        iterate: Vec<f64>,
    },
    #[error("constraint residual {residual:e} exceeds {tol:e} at t = {t}")]
    ConstraintViolation { t: f64, residual: f64, tol: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub newton_iters: usize,
    pub newton_residual: f64,
    pub constraint_residual: f64,
}

/// The step residual `H(x)`.
#[allow(clippy::too_many_arguments)]
pub fn stm_residual(
    prob: &SdaeProblem,
    theta: f64,
    delta: f64,
    t_k: f64,
    x_k: &[f64],
    dw: &[f64],
    x: &[f64],
) -> Vec<f64> {
    let rhs = step_rhs(prob, &prob.a(t_k), theta, delta, t_k, x_k, dw);
    raw_residual(prob, &prob.a(t_k + delta), theta * delta, t_k + delta, &rhs, x)
}

/// `A(t_k) x_k + (1 − θ)Δ F(t_k, x_k) + G(t_k, x_k) ΔW`.
fn step_rhs(
    prob: &SdaeProblem,
    a_k: &Matrix,
    theta: f64,
    delta: f64,
    t_k: f64,
    x_k: &[f64],
    dw: &[f64],
) -> Vec<f64> {
    let mut rhs = a_k.mul_vec(x_k);
    let explicit = (1.0 - theta) * delta;
    if explicit != 0.0 {
        for (r, f) in rhs.iter_mut().zip(prob.drift(t_k, x_k)) {
            *r += explicit * f;
        }
    }
    prob.diffusion(t_k, x_k).mul_vec_add(dw, &mut rhs);
    rhs
}

fn raw_residual(
    prob: &SdaeProblem,
    a_next: &Matrix,
    h: f64,
    t_next: f64,
    rhs: &[f64],
    x: &[f64],
) -> Vec<f64> {
    let mut out = a_next.mul_vec(x);
    for ((o, f), r) in out.iter_mut().zip(prob.drift(t_next, x)).zip(rhs) {
        *o -= h * f + r;
    }
    out
}

/// `D = AA⁻ − R/h`.
fn scaling_matrix(bundle: &ProjectorBundle, h: f64) -> Matrix {
    bundle.range_projector().sub(&bundle.r_proj.scale(1.0 / h))
}

/// Per-node data shared by every path integrated on the same grid.
struct NodeData {
    a: Matrix,
    bundle: ProjectorBundle,
    scaling: Option<Matrix>,
}

fn node_data(prob: &SdaeProblem, cfg: &ThetaConfig, t: f64) -> Result<NodeData, ProblemError> {
    let bundle = prob.bundle(t)?;
    let h = cfg.theta * cfg.delta;
    let scaling = (cfg.precondition && h > 0.0).then(|| scaling_matrix(&bundle, h));
    Ok(NodeData {
        a: bundle.a.clone(),
        bundle,
        scaling,
    })
}

#[allow(clippy::too_many_arguments)]
fn step_core(
    prob: &SdaeProblem,
    cfg: &ThetaConfig,
    a_k: &Matrix,
    next: &NodeData,
    t_k: f64,
    t_next: f64,
    x_k: &[f64],
    dw: &[f64],
) -> Result<(Vec<f64>, StepDiagnostics), StepError> {
    let h = cfg.theta * cfg.delta;
    let rhs = step_rhs(prob, a_k, cfg.theta, cfg.delta, t_k, x_k, dw);
    let raw_jac = |x: &[f64]| next.a.sub(&prob.jacobian(t_next, x).scale(h));

    let outcome = match &next.scaling {
        Some(dmat) => newton_solve(
            |x| dmat.mul_vec(&raw_residual(prob, &next.a, h, t_next, &rhs, x)),
            |x| dmat.matmul(&raw_jac(x)),
            x_k,
            &cfg.newton,
        ),
        None => newton_solve(
            |x| raw_residual(prob, &next.a, h, t_next, &rhs, x),
            raw_jac,
            x_k,
            &cfg.newton,
        ),
    };
    if let Some(failure) = outcome.failure {
        return Err(StepError::Newton {
            t: t_next,
            iterations: outcome.iterations,
            residual: outcome.final_residual_norm,
            failure,
            iterate: outcome.solution,
        });
    }
    let x_next = outcome.solution;
    let constraint = norm_inf(&constraint_residual_with(prob, &next.bundle, t_next, &x_next));
    if !(constraint <= cfg.constraint_check_tol) {
        return Err(StepError::ConstraintViolation {
            t: t_next,
            residual: constraint,
            tol: cfg.constraint_check_tol,
        });
    }
    Ok((
        x_next,
        StepDiagnostics {
            newton_iters: outcome.iterations,
            newton_residual: outcome.final_residual_norm,
            constraint_residual: constraint,
        },
    ))
}

/// One theta step from `(t_k, x_k)` with Wiener increment `dw`.
pub fn stm_step(
    prob: &SdaeProblem,
    cfg: &ThetaConfig,
    t_k: f64,
    x_k: &[f64],
    dw: &[f64],
) -> Result<(Vec<f64>, StepDiagnostics), StepError> {
    if x_k.len() != prob.d || dw.len() != prob.m {
        return Err(StepError::Config("state or increment has wrong length".into()));
    }
    let t_next = t_k + cfg.delta;
    let next = node_data(prob, cfg, t_next)?;
    step_core(prob, cfg, &prob.a(t_k), &next, t_k, t_next, x_k, dw)
}

/// Time grid and states of one integrated path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Newton iterations spent reaching each node (0 for the initial value).
    pub newton_iters: Vec<usize>,
    /// `‖R F(t_k, x_k)‖∞` at each node.
    pub constraint_residuals: Vec<f64>,
}

impl Trajectory {
    fn with_capacity(n: usize) -> Self {
        Self {
            times: Vec::with_capacity(n),
            states: Vec::with_capacity(n),
            newton_iters: Vec::with_capacity(n),
            constraint_residuals: Vec::with_capacity(n),
        }
    }

    pub(crate) fn push(&mut self, t: f64, x: Vec<f64>, iters: usize, constraint: f64) {
        self.times.push(t);
        self.states.push(x);
        self.newton_iters.push(iters);
        self.constraint_residuals.push(constraint);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one node")
    }

    pub fn max_constraint_residual(&self) -> f64 {
        self.constraint_residuals.iter().fold(0.0, |m, &v| m.max(v))
    }

    /// CSV with header `t,x1,...,xd,newton_iters,constraint_residual`; floats
    /// carry 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.states.first().map_or(0, Vec::len);
        let mut header = String::from("t");
        for i in 1..=d {
            header.push_str(&format!(",x{i}"));
        }
        header.push_str(",newton_iters,constraint_residual");
        writeln!(w, "{header}")?;
        for k in 0..self.len() {
            let mut line = fmt_f64(self.times[k]);
            for v in &self.states[k] {
                line.push(',');
                line.push_str(&fmt_f64(*v));
            }
            line.push_str(&format!(
                ",{},{}",
                self.newton_iters[k],
                fmt_f64(self.constraint_residuals[k])
            ));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// 17 significant digits, round-trip exact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Error)]
pub enum IntegrationError {
    #[error("expected {expected} increments of dimension {m}, got {got} of dimension {got_m}")]
    IncrementCount {
        expected: usize,
        m: usize,
        got: usize,
        got_m: usize,
    },
    #[error("initial value is not consistent: constraint residual {residual:e}")]
    InconsistentInitialValue { residual: f64 },
    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        partial: Box<Trajectory>,
        #[source]
        source: StepError,
    },
    #[error(transparent)]
    Setup(#[from] StepError),
}

impl From<ProblemError> for IntegrationError {
    fn from(e: ProblemError) -> Self {
        IntegrationError::Setup(StepError::Problem(e))
    }
}

/// Theta-method integrator with the per-node projector data precomputed,
/// so many paths can share one grid.
pub struct ThetaIntegrator<'a> {
    prob: &'a SdaeProblem,
    cfg: ThetaConfig,
    steps: usize,
    nodes: Vec<NodeData>,
    initial_residual: f64,
}

impl<'a> ThetaIntegrator<'a> {
    pub fn new(prob: &'a SdaeProblem, cfg: ThetaConfig) -> Result<Self, IntegrationError> {
        let steps = cfg.validate(prob.horizon)?;
        let nodes = (0..=steps)
            .map(|k| node_data(prob, &cfg, k as f64 * cfg.delta))
            .collect::<Result<Vec<_>, _>>()?;
        let initial_residual = norm_inf(&constraint_residual_with(
            prob,
            &nodes[0].bundle,
            0.0,
            &prob.x0,
        ));
        if !(initial_residual <= cfg.constraint_check_tol) {
            return Err(IntegrationError::InconsistentInitialValue {
                residual: initial_residual,
            });
        }
        Ok(Self {
            prob,
            cfg,
            steps,
            nodes,
            initial_residual,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn config(&self) -> &ThetaConfig {
        &self.cfg
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.cfg.delta
    }

    pub fn integrate(&self, increments: &Increments) -> Result<Trajectory, IntegrationError> {
        if increments.len() != self.steps || increments.dim() != self.prob.m {
            return Err(IntegrationError::IncrementCount {
                expected: self.steps,
                m: self.prob.m,
                got: increments.len(),
                got_m: increments.dim(),
            });
        }
        let mut traj = Trajectory::with_capacity(self.steps + 1);
        traj.push(0.0, self.prob.x0.clone(), 0, self.initial_residual);
        for k in 0..self.steps {
            let t_k = self.time(k);
            let t_next = self.time(k + 1);
            let result = step_core(
                self.prob,
                &self.cfg,
                &self.nodes[k].a,
                &self.nodes[k + 1],
                t_k,
                t_next,
                traj.terminal(),
                increments.step(k),
            );
            match result {
                Ok((x, diag)) => traj.push(t_next, x, diag.newton_iters, diag.constraint_residual),
                Err(source) => {
                    return Err(IntegrationError::StepFailed {
                        step: k,
                        partial: Box::new(traj),
                        source,
                    })
                }
            }
        }
        Ok(traj)
    }
}

/// Integrates one path over `[0, T]`; `increments` must hold `T/Δ` rows.
pub fn integrate(
    prob: &SdaeProblem,
    cfg: &ThetaConfig,
    increments: &Increments,
) -> Result<Trajectory, IntegrationError> {
    ThetaIntegrator::new(prob, *cfg)?.integrate(increments)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuardVerdict {
    Ok { bound: f64 },
    Warning { bound: f64 },
}

impl GuardVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, GuardVerdict::Ok { .. })
    }

    pub fn bound(&self) -> f64 {
        match *self {
            GuardVerdict::Ok { bound } | GuardVerdict::Warning { bound } => bound,
        }
    }
}

/// Sufficient stepsize bound for well-posedness and order-½ convergence:
/// `min{1/(L₁θ(1 + L̂²)), 1/(2L₂θ)}`, the second term only when `L₂` is declared.
pub fn stepsize_bound(constants: &ProblemConstants, theta: f64) -> f64 {
    let mut bound =
        1.0 / (constants.monotonicity_l1 * theta * (1.0 + constants.lhat * constants.lhat));
    if let Some(l2) = constants.coupling_l2 {
        bound = bound.min(1.0 / (2.0 * l2 * theta));
    }
    bound
}

/// Warns when `delta` is not below [`stepsize_bound`]. Never fails: the
/// bound is sufficient, not necessary.
pub fn stepsize_guard(constants: &ProblemConstants, theta: f64, delta: f64) -> GuardVerdict {
    let bound = stepsize_bound(constants, theta);
    if delta < bound {
        GuardVerdict::Ok { bound }
    } else {
        GuardVerdict::Warning { bound }
    }
}
