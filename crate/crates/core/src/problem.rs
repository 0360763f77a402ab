//! The SDAE model `A_t dX = F(t, X) dt + G(t, X) dW` and the built-in test problems.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{
    dot, norm2, norm_inf, projectors, solve_linear, sub_vec, LinalgError, Matrix, ProjectorBundle,
    DEFAULT_RANK_TOL,
};
use crate::paths::{stream_rng, uniform01};

pub type TimeMatrixFn = Arc<dyn Fn(f64) -> Matrix + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(f64, &[f64]) -> Matrix + Send + Sync>;

/// Labels accepted by [`builtin`].
pub const BUILTIN_LABELS: [&str; 4] = ["example51", "example52", "remark31", "linear_sanity"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("unknown problem '{label}' (valid labels: {})", BUILTIN_LABELS.join(", "))]
    UnknownLabel { label: String },
    #[error("invalid problem definition: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Declared structural constants of a problem.
///
/// These are metadata: they can be probed by sampling but never proven.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConstants {
    pub rank_r: usize,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    /// One-sided Lipschitz constant of the projected monotonicity condition.
    pub monotonicity_l1: f64,
    pub gamma: f64,
    /// Moment exponent paired with `monotonicity_l1`.
    pub p1: f64,
    pub coupling_l2: Option<f64>,
    pub p2: Option<f64>,
    /// Global bound on `|J(t,x)⁻¹|` with `J = A_t + R F'_x`.
    pub jacobian_bound_lj: f64,
    /// `(sup_t |A_t|) · L_J + d`.
    pub lhat: f64,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<(), ProblemError> {
        let bad = |msg: &str| Err(ProblemError::Invalid(msg.to_string()));
        if !(self.sigma_lo > 0.0 && self.sigma_lo <= self.sigma_hi) {
            return bad("require 0 < sigma_lo <= sigma_hi");
        }
        if !(self.monotonicity_l1 > 0.0) {
            return bad("require L1 > 0");
        }
        if !(self.gamma >= 1.0) {
            return bad("require gamma >= 1");
        }
        if !(self.p1 > 4.0 * self.gamma - 2.0) {
            return bad("require p1 > 4 gamma - 2");
        }
        if let Some(l2) = self.coupling_l2 {
            if !(l2 > 0.0) {
                return bad("require L2 > 0");
            }
        }
        if let Some(p2) = self.p2 {
            if !(p2 > 1.0) {
                return bad("require p2 > 1");
            }
        }
        if !(self.jacobian_bound_lj > 0.0 && self.lhat > 0.0) {
            return bad("require L_J > 0 and L-hat > 0");
        }
        Ok(())
    }
}

/// An index-1 SDAE with pure coefficient functions.
#[derive(Clone)]
pub struct SdaeProblem {
    pub label: String,
    pub d: usize,
    pub m: usize,
    pub horizon: f64,
    a_of_t: TimeMatrixFn,
    a_derivative: Option<TimeMatrixFn>,
    drift: VectorFn,
    jacobian: Option<MatrixFn>,
    diffusion: MatrixFn,
    pub x0: Vec<f64>,
    pub constants: Option<ProblemConstants>,
}

impl fmt::Debug for SdaeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdaeProblem")
            .field("label", &self.label)
            .field("d", &self.d)
            .field("m", &self.m)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("constants", &self.constants)
            .finish_non_exhaustive()
    }
}

impl SdaeProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        label: impl Into<String>,
        d: usize,
        m: usize,
        horizon: f64,
        a_of_t: impl Fn(f64) -> Matrix + Send + Sync + 'static,
        drift: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64]) -> Matrix + Send + Sync + 'static,
        x0: Vec<f64>,
    ) -> Result<Self, ProblemError> {
        if d == 0 || m == 0 {
            return Err(ProblemError::Invalid("dimensions must be positive".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ProblemError::Invalid(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if x0.len() != d {
            return Err(ProblemError::Invalid(format!(
                "initial value has length {}, expected {d}",
                x0.len()
            )));
        }
        let a0 = a_of_t(0.0);
        if a0.rows() != d || a0.cols() != d {
            return Err(ProblemError::Invalid(format!(
                "A(0) is {}x{}, expected {d}x{d}",
                a0.rows(),
                a0.cols()
            )));
        }
        let g0 = diffusion(0.0, &x0);
        if g0.rows() != d || g0.cols() != m {
            return Err(ProblemError::Invalid(format!(
                "G(0, x0) is {}x{}, expected {d}x{m}",
                g0.rows(),
                g0.cols()
            )));
        }
        Ok(Self {
            label: label.into(),
            d,
            m,
            horizon,
            a_of_t: Arc::new(a_of_t),
            a_derivative: None,
            drift: Arc::new(drift),
            jacobian: None,
            diffusion: Arc::new(diffusion),
            x0,
            constants: None,
        })
    }

    pub fn with_jacobian(
        mut self,
        jacobian: impl Fn(f64, &[f64]) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jacobian));
        self
    }

    pub fn with_a_derivative(mut self, a_dot: impl Fn(f64) -> Matrix + Send + Sync + 'static) -> Self {
        self.a_derivative = Some(Arc::new(a_dot));
        self
    }

    pub fn with_constants(mut self, constants: ProblemConstants) -> Result<Self, ProblemError> {
        constants.validate()?;
        self.constants = Some(constants);
        Ok(self)
    }

    pub fn with_initial_value(mut self, x0: Vec<f64>) -> Result<Self, ProblemError> {
        if x0.len() != self.d {
            return Err(ProblemError::Invalid("initial value has wrong length".into()));
        }
        self.x0 = x0;
        Ok(self)
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn a(&self, t: f64) -> Matrix {
        (self.a_of_t)(t)
    }

    /// `dA/dt`: analytic when supplied, central differences otherwise.
    pub fn a_dot(&self, t: f64) -> Matrix {
        match &self.a_derivative {
            Some(f) => f(t),
            None => {
                let h = 1e-6 * (1.0 + t.abs());
                self.a(t + h).sub(&self.a(t - h)).scale(0.5 / h)
            }
        }
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        (self.drift)(t, x)
    }

    pub fn diffusion(&self, t: f64, x: &[f64]) -> Matrix {
        (self.diffusion)(t, x)
    }

    /// `F'_x(t, x)`: the analytic Jacobian when supplied, central differences otherwise.
    pub fn jacobian(&self, t: f64, x: &[f64]) -> Matrix {
        match &self.jacobian {
            Some(j) => j(t, x),
            None => self.fd_jacobian(t, x),
        }
    }

    /// Central-difference Jacobian with step `1e-5 · (1 + |x|)`.
    pub fn fd_jacobian(&self, t: f64, x: &[f64]) -> Matrix {
        let h = 1e-5 * (1.0 + norm2(x));
        let mut jac = Matrix::zeros(self.d, self.d);
        let mut xp = x.to_vec();
        for j in 0..self.d {
            xp[j] = x[j] + h;
            let fp = self.drift(t, &xp);
            xp[j] = x[j] - h;
            let fm = self.drift(t, &xp);
            xp[j] = x[j];
            for i in 0..self.d {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    pub fn bundle(&self, t: f64) -> Result<ProjectorBundle, ProblemError> {
        Ok(projectors(&self.a(t), DEFAULT_RANK_TOL)?)
    }
}

/// `R_t · F(t, x)`; zero exactly when `x` lies on the constraint manifold.
pub fn constraint_residual(
    prob: &SdaeProblem,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>, ProblemError> {
    let bundle = prob.bundle(t)?;
    Ok(constraint_residual_with(prob, &bundle, t, x))
}

pub(crate) fn constraint_residual_with(
    prob: &SdaeProblem,
    bundle: &ProjectorBundle,
    t: f64,
    x: &[f64],
) -> Vec<f64> {
    bundle.r_proj.mul_vec(&prob.drift(t, x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyCheck {
    pub passed: bool,
    pub residual: f64,
}

pub fn check_initial_consistency(
    prob: &SdaeProblem,
    tol: f64,
) -> Result<ConsistencyCheck, ProblemError> {
    let residual = norm_inf(&constraint_residual(prob, 0.0, &prob.x0)?);
    Ok(ConsistencyCheck {
        passed: residual <= tol,
        residual,
    })
}

/// Sampled maxima of the two monotonicity quadratic forms divided by `|x − y|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionProbe {
    /// Estimate of L₁ from `2⟨Px−Py, A⁻(F(x)−F(y))⟩ + (p₁−1)|A⁻(G(x)−G(y))|²`.
    pub l1_estimate: f64,
    /// Estimate of L₂ from `2⟨Ax−Ay, F(x)−F(y)⟩ + p₂|G(x)−G(y)|²`.
    pub l2_estimate: f64,
    pub p1_used: f64,
    pub p2_used: f64,
    pub samples: usize,
}

/// Samples `(t, x, y)` uniformly from `[0, T] × [−ρ, ρ]^d × [−ρ, ρ]^d`, plus a
/// few structured pairs on the box diagonal, and reports the worst ratios.
///
/// Without declared constants the weights default to `p₁ = 2`, `p₂ = 1`.
pub fn probe_assumptions(
    prob: &SdaeProblem,
    n_samples: usize,
    box_radius: f64,
    seed: u64,
) -> Result<AssumptionProbe, ProblemError> {
    if n_samples == 0 {
        return Err(ProblemError::Invalid("n_samples must be >= 1".into()));
    }
    let p1 = prob.constants.as_ref().map_or(2.0, |c| c.p1);
    let p2 = prob.constants.as_ref().and_then(|c| c.p2).unwrap_or(1.0);
    let d = prob.d;
    let mut rng = stream_rng(seed, u64::MAX);
    let mut pairs: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::with_capacity(n_samples + 4 * d);
    for _ in 0..n_samples {
        let t = uniform01(&mut rng) * prob.horizon;
        let x = (0..d)
            .map(|_| (2.0 * uniform01(&mut rng) - 1.0) * box_radius)
            .collect();
        let y = (0..d)
            .map(|_| (2.0 * uniform01(&mut rng) - 1.0) * box_radius)
            .collect();
        pairs.push((t, x, y));
    }
    for corner in [box_radius, -box_radius] {
        for j in 0..d {
            let y = vec![corner; d];
            let mut x = y.clone();
            x[j] += corner.signum();
            pairs.push((0.0, x.clone(), y.clone()));
            pairs.push((prob.horizon, x, y));
        }
    }

    let mut l1 = f64::NEG_INFINITY;
    let mut l2 = f64::NEG_INFINITY;
    for (t, x, y) in &pairs {
        let diff = sub_vec(x, y);
        let dist2 = dot(&diff, &diff);
        if dist2 == 0.0 {
            continue;
        }
        let b = prob.bundle(*t)?;
        let fx = prob.drift(*t, x);
        let fy = prob.drift(*t, y);
        let df = sub_vec(&fx, &fy);
        let dg = prob.diffusion(*t, x).sub(&prob.diffusion(*t, y));

        let pdiff = b.p.mul_vec(&diff);
        let a_df = b.a_pinv.mul_vec(&df);
        let a_dg = b.a_pinv.matmul(&dg);
        let form1 = 2.0 * dot(&pdiff, &a_df) + (p1 - 1.0) * a_dg.norm().powi(2);
        l1 = l1.max(form1 / dist2);

        let adiff = b.a.mul_vec(&diff);
        let form2 = 2.0 * dot(&adiff, &df) + p2 * dg.norm().powi(2);
        l2 = l2.max(form2 / dist2);
    }
    Ok(AssumptionProbe {
        l1_estimate: l1,
        l2_estimate: l2,
        p1_used: p1,
        p2_used: p2,
        samples: pairs.len(),
    })
}

/// Worst relative mismatch `‖J − J_fd‖ / (1 + ‖J‖)` between the supplied
/// Jacobian and central differences over random `(t, x)` with `|x_i| ≤ 2`.
pub fn jacobian_self_check(prob: &SdaeProblem, n_samples: usize, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, u64::MAX - 1);
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let t = uniform01(&mut rng) * prob.horizon;
        let x: Vec<f64> = (0..prob.d)
            .map(|_| 4.0 * uniform01(&mut rng) - 2.0)
            .collect();
        let j = prob.jacobian(t, &x);
        let j_fd = prob.fd_jacobian(t, &x);
        worst = worst.max(j.sub(&j_fd).norm() / (1.0 + j.norm()));
    }
    worst
}

/// Largest sampled `|J(t,x)⁻¹|` with `J = A_t + R_t F'_x`, or `inf` if a
/// sample is singular.
pub fn index1_jacobian_bound(
    prob: &SdaeProblem,
    n_samples: usize,
    seed: u64,
) -> Result<f64, ProblemError> {
    let mut rng = stream_rng(seed, u64::MAX - 2);
    let d = prob.d;
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let t = uniform01(&mut rng) * prob.horizon;
        let x: Vec<f64> = (0..d).map(|_| 4.0 * uniform01(&mut rng) - 2.0).collect();
        let b = prob.bundle(t)?;
        let j = b.a.add(&b.r_proj.matmul(&prob.jacobian(t, &x)));
        let mut inv = Matrix::zeros(d, d);
        for col in 0..d {
            let mut e = vec![0.0; d];
            e[col] = 1.0;
            match solve_linear(&j, &e) {
                Ok(c) => {
                    for (i, v) in c.into_iter().enumerate() {
                        inv[(i, col)] = v;
                    }
                }
                Err(_) => return Ok(f64::INFINITY),
            }
        }
        worst = worst.max(inv.norm());
    }
    Ok(worst)
}

/// Built-in problems by label.
pub fn builtin(label: &str) -> Result<SdaeProblem, ProblemError> {
    match label {
        "example51" => example51(),
        "example52" => example52(),
        "remark31" => remark31(),
        "linear_sanity" => linear_sanity(),
        other => Err(ProblemError::UnknownLabel {
            label: other.to_string(),
        }),
    }
}

/// Two-dimensional system with time-varying `A_t` of rank one and cubic drift.
fn example51() -> Result<SdaeProblem, ProblemError> {
    const A: f64 = 1.0;
    const B: f64 = 0.2;
    const P1: f64 = 11.0;
    let horizon = 1.0;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let lj = 1.5f64.sqrt();
    let sup_a = horizon * horizon + 1.0;
    let prob = SdaeProblem::new(
        "example51",
        2,
        2,
        horizon,
        move |t| {
            let v = s * (t * t + 1.0);
            Matrix::from_rows(&[[0.0, 0.0], [-v, v]])
        },
        |t, x| {
            let dx = x[0] - x[1];
            vec![x[0] + x[1] + t.sin(), dx * dx * dx - A * dx + 1.0]
        },
        |_, x| {
            let dx = x[0] - x[1];
            Matrix::from_rows(&[[0.0, 0.0], [B * (x[0] + x[1] + 1.0), B * dx * dx + 2.0 * B]])
        },
        vec![1.0, -1.0],
    )?
    .with_jacobian(|_, x| {
        let dx = x[0] - x[1];
        let k = 3.0 * dx * dx - A;
        Matrix::from_rows(&[[1.0, 1.0], [k, -k]])
    })
    .with_a_derivative(move |t| {
        let v = 2.0 * s * t;
        Matrix::from_rows(&[[0.0, 0.0], [-v, v]])
    });
    prob.with_constants(ProblemConstants {
        rank_r: 1,
        sigma_lo: 1.0,
        sigma_hi: sup_a,
        monotonicity_l1: 2.0 * (A + (P1 - 1.0) * B * B),
        gamma: 3.0,
        p1: P1,
        coupling_l2: None,
        p2: None,
        jacobian_bound_lj: lj,
        lhat: sup_a * lj + 2.0,
    })
}

/// Three-dimensional diagonal system with one algebraic row.
fn example52() -> Result<SdaeProblem, ProblemError> {
    const C: f64 = 0.1;
    let horizon: f64 = 1.0;
    let lj = 2.0 * (horizon * horizon + 1.0) + 2.0 * (horizon + 1.0);
    let sup_a = (0.25f64 + 100.0).sqrt();
    let prob = SdaeProblem::new(
        "example52",
        3,
        3,
        horizon,
        |t| Matrix::from_diag(&[1.0 / (2.0 * (t * t + 1.0)), 10.0, 0.0]),
        |t, x| vec![-x[0] * x[0] * x[0], x[2], x[1] * t + x[2]],
        |t, x| Matrix::from_diag(&[t.sin(), C * x[0] * x[0], 0.0]),
        vec![1.0, -1.0, 0.0],
    )?
    .with_jacobian(|t, x| {
        Matrix::from_rows(&[
            [-3.0 * x[0] * x[0], 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, t, 1.0],
        ])
    })
    .with_a_derivative(|t| {
        let w = t * t + 1.0;
        Matrix::from_diag(&[-t / (w * w), 0.0, 0.0])
    });
    prob.with_constants(ProblemConstants {
        rank_r: 2,
        sigma_lo: 1.0 / (2.0 * (horizon * horizon + 1.0)),
        sigma_hi: 10.0,
        monotonicity_l1: 0.1,
        gamma: 3.0,
        p1: 21.0,
        coupling_l2: Some(10.0),
        p2: Some(25.0),
        jacobian_bound_lj: lj,
        lhat: sup_a * lj + 3.0,
    })
}

/// Constant singular `A` for which the unprojected coupling condition fails.
///
/// The algebraic row carries `F₃ = −x₃`, which leaves every projected
/// quantity (`A⁻F`, `A⁻G`, `⟨Ax, F⟩`) unchanged while pinning `Qx = 0`.
fn remark31() -> Result<SdaeProblem, ProblemError> {
    let lj = (4.0f64 + 0.01 + 1.0).sqrt();
    let sup_a = (0.25f64 + 100.0).sqrt();
    let prob = SdaeProblem::new(
        "remark31",
        3,
        3,
        1.0,
        |_| Matrix::from_diag(&[0.5, 10.0, 0.0]),
        |_, x| vec![-x[0] * x[0] * x[0], 0.0, -x[2]],
        |_, x| Matrix::from_diag(&[0.0, x[0] * x[0], 0.0]),
        vec![1.0, 0.0, 0.0],
    )?
    .with_jacobian(|_, x| Matrix::from_diag(&[-3.0 * x[0] * x[0], 0.0, -1.0]))
    .with_a_derivative(|_| Matrix::zeros(3, 3));
    prob.with_constants(ProblemConstants {
        rank_r: 2,
        sigma_lo: 0.5,
        sigma_hi: 10.0,
        monotonicity_l1: 0.1,
        gamma: 3.0,
        p1: 11.0,
        coupling_l2: None,
        p2: None,
        jacobian_bound_lj: lj,
        lhat: sup_a * lj + 3.0,
    })
}

/// `dX = −X dt`, `X₀ = 1`: a deterministic scalar ODE with closed-form steps.
fn linear_sanity() -> Result<SdaeProblem, ProblemError> {
    let prob = SdaeProblem::new(
        "linear_sanity",
        1,
        1,
        1.0,
        |_| Matrix::identity(1),
        |_, x| vec![-x[0]],
        |_, _| Matrix::zeros(1, 1),
        vec![1.0],
    )?
    .with_jacobian(|_, _| Matrix::from_rows(&[[-1.0]]))
    .with_a_derivative(|_| Matrix::zeros(1, 1));
    prob.with_constants(ProblemConstants {
        rank_r: 1,
        sigma_lo: 1.0,
        sigma_hi: 1.0,
        monotonicity_l1: 0.1,
        gamma: 1.0,
        p1: 3.0,
        coupling_l2: Some(0.1),
        p2: Some(2.0),
        jacobian_bound_lj: 1.0,
        lhat: 2.0,
    })
}

/// Sampled check of `|A_t| ≤ √r·d·σ̄` and `|A_t⁻| ≤ √r·d/σ̲`; returns the
/// worst ratio of observed norm to bound (≤ 1 means the bounds hold).
pub fn norm_bound_ratio(prob: &SdaeProblem, n_samples: usize) -> Result<f64, ProblemError> {
    let c = prob
        .constants
        .as_ref()
        .ok_or_else(|| ProblemError::Invalid("problem declares no constants".into()))?;
    let scale = (c.rank_r as f64).sqrt() * prob.d as f64;
    let mut worst = 0.0f64;
    for i in 0..n_samples {
        let t = prob.horizon * i as f64 / (n_samples.max(2) - 1) as f64;
        let b = prob.bundle(t)?;
        worst = worst
            .max(b.a.norm() / (scale * c.sigma_hi))
            .max(b.a_pinv.norm() / (scale / c.sigma_lo));
    }
    Ok(worst)
}
