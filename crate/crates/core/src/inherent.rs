//! Decoupled form of an index-1 SDAE.
//!
//! Splitting `X = U + V` with `U = PX`, `V = QX`, the algebraic part is a
//! function of the differential part, `V = V̂(t, U)`, where `V̂(t, u)` is
//! the solution of `A_t v + R F(t, u + v) = 0`. `U` then follows the
//! unconstrained SDE `dU = f(t, U) dt + g(t, U) dW` with
//! `f(t, u) = A⁻F(t, u + V̂(t, u))` and `g(t, u) = A⁻G(t, u + V̂(t, u))`.
//!
//! The theta scheme differences `A_t x` as a whole, so its limit solves
//! `d(A_t X_t) = F dt + G dW`. When `A_t` varies in time this adds the
//! product-rule term `−A_t⁻ A'_t X` to the drift of `U`. [`InherentIntegrator`]
//! includes that term, and then gives an independent route to the same
//! solution as [`crate::stepper`]. It requires `Ker(A_t)` and `Im(A_t)` to be
//! constant in `t`, as they are for every builtin problem.

use std::cell::RefCell;

use thiserror::Error;

use crate::linalg::{dot, norm_inf, solve_linear, Matrix, ProjectorBundle};
use crate::newton::{newton_solve, NewtonConfig, NewtonFailure};
use crate::paths::Increments;
use crate::problem::{constraint_residual_with, ProblemError, SdaeProblem};
use crate::stepper::{IntegrationError, StepError, ThetaConfig, Trajectory};

/// Residual bound required of every constraint solve.
pub const CONSTRAINT_SOLVE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InherentError {
    #[error("constraint solve failed at t = {t} (residual {residual:e}): {failure:?}")]
    ConstraintSolve {
        t: f64,
        residual: f64,
        failure: Option<NewtonFailure>,
    },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

fn inner_newton() -> NewtonConfig {
    NewtonConfig {
        tol: 1e-13,
        max_iter: 100,
        ..NewtonConfig::default()
    }
}

/// Solution of the constraint equation in kernel coordinates: `v = K s − Qu`
/// where the columns of `K` span `Ker(A_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSolution {
    pub v: Vec<f64>,
    pub coords: Vec<f64>,
}

/// `V̂(t, u)` using a precomputed projector bundle and an optional warm start
/// for the kernel coordinates.
pub fn solve_constraint_with(
    prob: &SdaeProblem,
    bundle: &ProjectorBundle,
    t: f64,
    u: &[f64],
    warm: Option<&[f64]>,
) -> Result<ConstraintSolution, InherentError> {
    let d = prob.d;
    let kernel = &bundle.kernel_basis;
    let coimage = &bundle.coimage_basis;
    let nk = kernel.len();
    let pu = bundle.p.mul_vec(u);
    let qu = bundle.q.mul_vec(u);
    if nk == 0 {
        return Ok(ConstraintSolution {
            v: qu.iter().map(|x| -x).collect(),
            coords: Vec::new(),
        });
    }
    let lift = |s: &[f64]| -> Vec<f64> {
        let mut x = pu.clone();
        for (basis, &c) in kernel.iter().zip(s) {
            for (xi, bi) in x.iter_mut().zip(basis) {
                *xi += c * bi;
            }
        }
        x
    };
    let residual = |s: &[f64]| -> Vec<f64> {
        let f = prob.drift(t, &lift(s));
        coimage.iter().map(|c| dot(c, &f)).collect()
    };
    let jacobian = |s: &[f64]| -> Matrix {
        let jf = prob.jacobian(t, &lift(s));
        let mut out = Matrix::zeros(nk, nk);
        for (i, c) in coimage.iter().enumerate() {
            for (j, k) in kernel.iter().enumerate() {
                let jk = jf.mul_vec(k);
                out[(i, j)] = dot(c, &jk);
            }
        }
        out
    };
    let init = warm.map_or_else(|| vec![0.0; nk], <[f64]>::to_vec);
    let out = newton_solve(residual, jacobian, &init, &inner_newton());
    let x = lift(&out.solution);
    let v: Vec<f64> = (0..d).map(|i| x[i] - pu[i] - qu[i]).collect();
    let full = constraint_residual_with(prob, bundle, t, &x);
    let res = norm_inf(&full);
    let scale = 1.0 + norm_inf(&prob.drift(t, &x));
    if out.failure.is_some() || !(res <= CONSTRAINT_SOLVE_TOL * scale) {
        return Err(InherentError::ConstraintSolve {
            t,
            residual: res,
            failure: out.failure,
        });
    }
    Ok(ConstraintSolution {
        v,
        coords: out.solution,
    })
}

/// `V̂(t, u)`: the `v` solving `A_t v + R F(t, u + v) = 0`.
pub fn solve_constraint(prob: &SdaeProblem, t: f64, u: &[f64]) -> Result<Vec<f64>, InherentError> {
    let bundle = prob.bundle(t)?;
    Ok(solve_constraint_with(prob, &bundle, t, u, None)?.v)
}

/// Coefficients `f`, `g` of the inherent SDE.
pub struct InherentCoefficients<'a> {
    prob: &'a SdaeProblem,
}

pub fn inherent_coeffs(prob: &SdaeProblem) -> InherentCoefficients<'_> {
    InherentCoefficients { prob }
}

impl InherentCoefficients<'_> {
    /// `f(t, u) = A_t⁻ F(t, u + V̂(t, u))`.
    pub fn f_eval(&self, t: f64, u: &[f64]) -> Result<Vec<f64>, InherentError> {
        let b = self.prob.bundle(t)?;
        let sol = solve_constraint_with(self.prob, &b, t, u, None)?;
        Ok(b.a_pinv.mul_vec(&self.prob.drift(t, &reconstruct(u, &sol.v))))
    }

    /// `f(t, u) − A_t⁻ A'_t x` with `x = u + V̂(t, u)`: the drift of `U` when
    /// the equation is read as `d(A_t X_t) = F dt + G dW`.
    pub fn f_product_rule_eval(&self, t: f64, u: &[f64]) -> Result<Vec<f64>, InherentError> {
        let b = self.prob.bundle(t)?;
        let sol = solve_constraint_with(self.prob, &b, t, u, None)?;
        let x = reconstruct(u, &sol.v);
        let mut f = self.prob.drift(t, &x);
        let ax = self.prob.a_dot(t).mul_vec(&x);
        for (fi, ai) in f.iter_mut().zip(&ax) {
            *fi -= ai;
        }
        Ok(b.a_pinv.mul_vec(&f))
    }

    /// `g(t, u) = A_t⁻ G(t, u + V̂(t, u))`.
    pub fn g_eval(&self, t: f64, u: &[f64]) -> Result<Matrix, InherentError> {
        let b = self.prob.bundle(t)?;
        let sol = solve_constraint_with(self.prob, &b, t, u, None)?;
        Ok(b.a_pinv.matmul(&self.prob.diffusion(t, &reconstruct(u, &sol.v))))
    }
}

fn drift_minus_transport(prob: &SdaeProblem, node: &InherentNode, t: f64, x: &[f64]) -> Vec<f64> {
    let mut f = prob.drift(t, x);
    let ax = node.a_dot.mul_vec(x);
    for (fi, ai) in f.iter_mut().zip(&ax) {
        *fi -= ai;
    }
    f
}

fn reconstruct(u: &[f64], v: &[f64]) -> Vec<f64> {
    u.iter().zip(v).map(|(a, b)| a + b).collect()
}

/// `∂f/∂u = A⁻F'(x)(P + K ∂s/∂u)` with `∂s/∂u = −(CᵀF'K)⁻¹ CᵀF'P`, where
/// `x = Pu + Ks` is the reconstructed state.
#[cfg(test)]
fn f_jacobian(prob: &SdaeProblem, bundle: &ProjectorBundle, t: f64, x: &[f64]) -> Matrix {
    f_jacobian_shifted(prob, bundle, t, x, None)
}

/// As [`f_jacobian`] with `F'` replaced by `F' − shift`.
fn f_jacobian_shifted(
    prob: &SdaeProblem,
    bundle: &ProjectorBundle,
    t: f64,
    x: &[f64],
    shift: Option<&Matrix>,
) -> Matrix {
    let d = prob.d;
    let jf = prob.jacobian(t, x);
    let kernel = &bundle.kernel_basis;
    let coimage = &bundle.coimage_basis;
    let nk = kernel.len();
    let mut dx_du = bundle.p.clone();
    let outer = match shift {
        Some(m) => jf.sub(m),
        None => jf.clone(),
    };
    if nk > 0 {
        let mut ck = Matrix::zeros(nk, nk);
        let jk: Vec<Vec<f64>> = kernel.iter().map(|k| jf.mul_vec(k)).collect();
        for i in 0..nk {
            for j in 0..nk {
                ck[(i, j)] = dot(&coimage[i], &jk[j]);
            }
        }
        let jp = jf.matmul(&bundle.p);
        for col in 0..d {
            let rhs: Vec<f64> = coimage
                .iter()
                .map(|c| -(0..d).map(|r| c[r] * jp[(r, col)]).sum::<f64>())
                .collect();
            let ds = solve_linear(&ck, &rhs).unwrap_or_else(|_| vec![f64::NAN; nk]);
            for (k, &s) in kernel.iter().zip(&ds) {
                for row in 0..d {
                    dx_du[(row, col)] += k[row] * s;
                }
            }
        }
    }
    bundle.a_pinv.matmul(&outer).matmul(&dx_du)
}

struct InherentNode {
    bundle: ProjectorBundle,
    a_dot: Matrix,
}

const SUBSPACE_TOL: f64 = 1e-10;

/// Theta method applied to the inherent SDE, with `X_k = U_k + V̂(t_k, U_k)`.
pub struct InherentIntegrator<'a> {
    prob: &'a SdaeProblem,
    cfg: ThetaConfig,
    steps: usize,
    nodes: Vec<InherentNode>,
}

impl<'a> InherentIntegrator<'a> {
    pub fn new(prob: &'a SdaeProblem, cfg: ThetaConfig) -> Result<Self, IntegrationError> {
        // Reuse the stepper's validation and initial-value check.
        let reference = crate::stepper::ThetaIntegrator::new(prob, cfg)?;
        let steps = reference.steps();
        let nodes = (0..=steps)
            .map(|k| {
                let t = k as f64 * cfg.delta;
                prob.bundle(t).map(|bundle| InherentNode {
                    bundle,
                    a_dot: prob.a_dot(t),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (p0, r0) = (&nodes[0].bundle.p, &nodes[0].bundle.r_proj);
        if let Some(k) = nodes.iter().position(|n| {
            n.bundle.p.sub(p0).max_abs() > SUBSPACE_TOL
                || n.bundle.r_proj.sub(r0).max_abs() > SUBSPACE_TOL
        }) {
            return Err(IntegrationError::Setup(StepError::Config(format!(
                "kernel or range of A_t changes at t = {}",
                k as f64 * cfg.delta
            ))));
        }
        Ok(Self {
            prob,
            cfg,
            steps,
            nodes,
        })
    }

    fn time(&self, k: usize) -> f64 {
        k as f64 * self.cfg.delta
    }

    pub fn integrate(&self, increments: &Increments) -> Result<Trajectory, IntegrationError> {
        let prob = self.prob;
        if increments.len() != self.steps || increments.dim() != prob.m {
            return Err(IntegrationError::IncrementCount {
                expected: self.steps,
                m: prob.m,
                got: increments.len(),
                got_m: increments.dim(),
            });
        }
        let theta = self.cfg.theta;
        let delta = self.cfg.delta;
        let h = theta * delta;

        let b0 = &self.nodes[0].bundle;
        let mut u = b0.p.mul_vec(&prob.x0);
        let sol0 = solve_constraint_with(prob, b0, 0.0, &u, None)
            .map_err(|e| self.fail(0, Trajectory::default(), e))?;
        let mut coords = sol0.coords;
        let x0 = reconstruct(&u, &sol0.v);

        let mut traj = Trajectory::default();
        let c0 = norm_inf(&constraint_residual_with(prob, b0, 0.0, &x0));
        traj.push(0.0, x0.clone(), 0, c0);
        let mut x_k = x0;

        for k in 0..self.steps {
            let t_k = self.time(k);
            let t1 = self.time(k + 1);
            let bk = &self.nodes[k].bundle;
            let n1 = &self.nodes[k + 1];
            let b1 = &n1.bundle;

            // Explicit part at t_k uses the already reconstructed X_k.
            let mut rhs = u.clone();
            let fk = bk.a_pinv.mul_vec(&drift_minus_transport(prob, &self.nodes[k], t_k, &x_k));
            for (r, f) in rhs.iter_mut().zip(&fk) {
                *r += (1.0 - theta) * delta * f;
            }
            bk.a_pinv
                .matmul(&prob.diffusion(t_k, &x_k))
                .mul_vec_add(increments.step(k), &mut rhs);

            let warm = RefCell::new(coords.clone());
            let state_at = |uu: &[f64]| -> Option<Vec<f64>> {
                let guess = warm.borrow().clone();
                let sol = solve_constraint_with(prob, b1, t1, uu, Some(&guess)).ok()?;
                *warm.borrow_mut() = sol.coords;
                Some(reconstruct(uu, &sol.v))
            };
            let residual = |uu: &[f64]| -> Vec<f64> {
                match state_at(uu) {
                    Some(x) => {
                        let f = b1.a_pinv.mul_vec(&drift_minus_transport(prob, n1, t1, &x));
                        (0..prob.d).map(|i| uu[i] - h * f[i] - rhs[i]).collect()
                    }
                    None => vec![f64::NAN; prob.d],
                }
            };
            let jacobian = |uu: &[f64]| -> Matrix {
                match state_at(uu) {
                    Some(x) => Matrix::identity(prob.d)
                        .sub(&f_jacobian_shifted(prob, b1, t1, &x, Some(&n1.a_dot)).scale(h)),
                    None => Matrix::from_row_major(
                        prob.d,
                        prob.d,
                        vec![f64::NAN; prob.d * prob.d],
                    ),
                }
            };
            let out = newton_solve(residual, jacobian, &u, &self.cfg.newton);
            if let Some(failure) = out.failure {
                let err = StepError::Newton {
                    t: t1,
                    iterations: out.iterations,
                    residual: out.final_residual_norm,
                    failure,
                    iterate: out.solution,
                };
                return Err(IntegrationError::StepFailed {
                    step: k,
                    partial: Box::new(traj),
                    source: err,
                });
            }
            u = out.solution;
            let sol = solve_constraint_with(prob, b1, t1, &u, Some(&warm.borrow()))
                .map_err(|e| self.fail(k, traj.clone(), e))?;
            coords = sol.coords;
            let x1 = reconstruct(&u, &sol.v);
            let c1 = norm_inf(&constraint_residual_with(prob, b1, t1, &x1));
            traj.push(t1, x1.clone(), out.iterations, c1);
            x_k = x1;
        }
        Ok(traj)
    }

    fn fail(&self, step: usize, partial: Trajectory, e: InherentError) -> IntegrationError {
        let source = match e {
            InherentError::ConstraintSolve { t, residual, failure } => StepError::Newton {
                t,
                iterations: 0,
                residual,
                failure: failure.unwrap_or(NewtonFailure::MaxIterations),
                iterate: Vec::new(),
            },
            InherentError::Problem(p) => StepError::Problem(p),
        };
        IntegrationError::StepFailed {
            step,
            partial: Box::new(partial),
            source,
        }
    }
}

/// Integrates the inherent SDE and reconstructs `X` at every node.
pub fn integrate_inherent(
    prob: &SdaeProblem,
    cfg: &ThetaConfig,
    increments: &Increments,
) -> Result<Trajectory, IntegrationError> {
    InherentIntegrator::new(prob, *cfg)?.integrate(increments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{norm2, sub_vec};
    use crate::paths::{stream_rng, uniform01};
    use crate::problem::builtin;
    use crate::stepper::integrate;

    fn check_residual(prob: &SdaeProblem, t: f64, u: &[f64], v: &[f64]) {
        let b = prob.bundle(t).unwrap();
        let mut r = b.a.mul_vec(v);
        let rf = b.r_proj.mul_vec(&prob.drift(t, &reconstruct(u, v)));
        for (a, c) in r.iter_mut().zip(rf) {
            *a += c;
        }
        assert!(norm_inf(&r) <= 1e-10, "residual {r:?}");
        assert!(norm_inf(&b.p.mul_vec(v)) <= 1e-14);
    }

    #[test]
    fn example51_constraint_function() {
        let p = builtin("example51").unwrap();
        for (t, a) in [(0.0, 0.3), (0.4, -1.2), (1.0, 2.0)] {
            let u = [a, -a];
            let v = solve_constraint(&p, t, &u).unwrap();
            let s = -f64::sin(t) / 2.0;
            assert!((v[0] - s).abs() < 1e-12 && (v[1] - s).abs() < 1e-12, "{v:?}");
            check_residual(&p, t, &u, &v);
        }
    }

    #[test]
    fn example52_constraint_function() {
        let p = builtin("example52").unwrap();
        for (t, u1, u2) in [(0.0, 1.0, -1.0), (0.6, -0.5, 2.0), (1.0, 3.0, 0.25)] {
            let u = [u1, u2, 0.0];
            let v = solve_constraint(&p, t, &u).unwrap();
            assert!(v[0].abs() < 1e-14 && v[1].abs() < 1e-14);
            assert!((v[2] + u2 * t).abs() < 1e-12);
            check_residual(&p, t, &u, &v);
        }
    }

    #[test]
    fn feasible_states_reconstruct() {
        for label in ["example51", "example52", "remark31"] {
            let p = builtin(label).unwrap();
            let delta = 2f64.powi(-6);
            let traj = integrate(&p, &ThetaConfig::new(1.0, delta), &Increments::zeros(p.m, 64))
                .unwrap();
            for (t, x) in traj.times.iter().zip(&traj.states).step_by(8) {
                let b = p.bundle(*t).unwrap();
                let v = solve_constraint(&p, *t, &b.p.mul_vec(x)).unwrap();
                let qx = b.q.mul_vec(x);
                // Stepper states satisfy the constraint to Newton accuracy only.
                assert!(norm_inf(&sub_vec(&v, &qx)) < 1e-4, "{label} t={t}");
            }
        }
    }

    #[test]
    fn no_algebraic_part_gives_zero() {
        let p = builtin("linear_sanity").unwrap();
        assert_eq!(solve_constraint(&p, 0.3, &[2.0]).unwrap(), vec![0.0]);
        let c = inherent_coeffs(&p);
        assert!((c.f_eval(0.0, &[2.0]).unwrap()[0] + 2.0).abs() < 1e-15);
        assert_eq!(c.g_eval(0.0, &[2.0]).unwrap(), Matrix::zeros(1, 1));
    }

    #[test]
    fn example52_drift() {
        let p = builtin("example52").unwrap();
        let c = inherent_coeffs(&p);
        for (t, u1, u2) in [(0.0, 1.0, -1.0), (0.5, 0.7, 1.3)] {
            let f = c.f_eval(t, &[u1, u2, 0.0]).unwrap();
            let s = t * t + 1.0;
            let expected = [2.0 * s * -(u1 * u1 * u1), (-u2 * t) / 10.0, 0.0];
            for i in 0..3 {
                assert!((f[i] - expected[i]).abs() < 1e-12, "{f:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn drift_depends_on_projected_state_only() {
        let mut rng = stream_rng(17, 0);
        for label in ["example51", "example52", "remark31"] {
            let p = builtin(label).unwrap();
            let c = inherent_coeffs(&p);
            for _ in 0..20 {
                let t = uniform01(&mut rng);
                let u: Vec<f64> = (0..p.d).map(|_| 2.0 * uniform01(&mut rng) - 1.0).collect();
                let pu = p.bundle(t).unwrap().p.mul_vec(&u);
                let f = c.f_eval(t, &u).unwrap();
                let fp = c.f_eval(t, &pu).unwrap();
                assert!(norm_inf(&sub_vec(&f, &fp)) < 1e-11, "{label}");
                // f takes values in Im(P).
                let pf = p.bundle(t).unwrap().p.mul_vec(&f);
                assert!(norm_inf(&sub_vec(&pf, &f)) < 1e-11 * (1.0 + norm_inf(&f)));
            }
        }
    }

    #[test]
    fn constraint_function_growth_bounded_by_lhat() {
        let mut rng = stream_rng(23, 0);
        for label in ["example51", "example52", "remark31"] {
            let p = builtin(label).unwrap();
            let lhat = p.constants.as_ref().unwrap().lhat;
            for _ in 0..50 {
                let t = uniform01(&mut rng);
                let u: Vec<f64> = (0..p.d).map(|_| 4.0 * uniform01(&mut rng) - 2.0).collect();
                let w: Vec<f64> = (0..p.d).map(|_| 4.0 * uniform01(&mut rng) - 2.0).collect();
                let vu = solve_constraint(&p, t, &u).unwrap();
                let vw = solve_constraint(&p, t, &w).unwrap();
                assert!(norm2(&sub_vec(&vu, &vw)) <= lhat * norm2(&sub_vec(&u, &w)));
            }
        }
    }

    #[test]
    fn f_jacobian_matches_finite_differences() {
        for label in ["example51", "example52"] {
            let p = builtin(label).unwrap();
            let t = 0.37;
            let b = p.bundle(t).unwrap();
            let c = inherent_coeffs(&p);
            let u = b.p.mul_vec(&vec![0.4; p.d].iter().enumerate().map(|(i, v)| v + 0.1 * i as f64).collect::<Vec<_>>());
            let v = solve_constraint(&p, t, &u).unwrap();
            let jac = f_jacobian(&p, &b, t, &reconstruct(&u, &v));
            let eps = 1e-6;
            for j in 0..p.d {
                let mut up = u.clone();
                up[j] += eps;
                let mut um = u.clone();
                um[j] -= eps;
                let fp = c.f_eval(t, &up).unwrap();
                let fm = c.f_eval(t, &um).unwrap();
                for i in 0..p.d {
                    let fd = (fp[i] - fm[i]) / (2.0 * eps);
                    assert!((fd - jac[(i, j)]).abs() < 1e-6, "{label} ({i},{j}): {fd} vs {}", jac[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn product_rule_jacobian_matches_finite_differences() {
        for label in ["example51", "example52"] {
            let p = builtin(label).unwrap();
            let t = 0.61;
            let b = p.bundle(t).unwrap();
            let c = inherent_coeffs(&p);
            let u = b.p.mul_vec(&vec![0.3; p.d].iter().enumerate().map(|(i, v)| v - 0.2 * i as f64).collect::<Vec<_>>());
            let v = solve_constraint(&p, t, &u).unwrap();
            let jac = f_jacobian_shifted(&p, &b, t, &reconstruct(&u, &v), Some(&p.a_dot(t)));
            let eps = 1e-6;
            for j in 0..p.d {
                let mut up = u.clone();
                up[j] += eps;
                let mut um = u.clone();
                um[j] -= eps;
                let fp = c.f_product_rule_eval(t, &up).unwrap();
                let fm = c.f_product_rule_eval(t, &um).unwrap();
                for i in 0..p.d {
                    let fd = (fp[i] - fm[i]) / (2.0 * eps);
                    assert!((fd - jac[(i, j)]).abs() < 1e-6, "{label} ({i},{j}): {fd} vs {}", jac[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn example52_product_rule_drift() {
        let p = builtin("example52").unwrap();
        let c = inherent_coeffs(&p);
        let (t, u1, u2) = (0.8, 0.7, -0.4);
        let w = t * t + 1.0;
        let f = c.f_product_rule_eval(t, &[u1, u2, 0.0]).unwrap();
        assert!((f[0] - (-2.0 * w * u1 * u1 * u1 + 2.0 * t * u1 / w)).abs() < 1e-12);
        assert!((f[1] - (-u2 * t) / 10.0).abs() < 1e-12);
        assert_eq!(f[2], 0.0);
    }

    #[test]
    fn rotating_kernel_is_rejected() {
        let p = SdaeProblem::new(
            "rotating",
            2,
            1,
            1.0,
            |t| Matrix::from_rows(&[[t.cos(), t.sin()], [0.0, 0.0]]),
            |_, x| vec![-x[0], -x[1]],
            |_, _| Matrix::zeros(2, 1),
            vec![0.0, 0.0],
        )
        .unwrap();
        let cfg = ThetaConfig::new(1.0, 0.25);
        assert!(matches!(
            InherentIntegrator::new(&p, cfg),
            Err(IntegrationError::Setup(StepError::Config(_)))
        ));
    }

    #[test]
    fn linear_sanity_matches_stepper() {
        let p = builtin("linear_sanity").unwrap();
        let cfg = ThetaConfig::new(1.0, 0.1).with_newton(NewtonConfig::with_tol(1e-12));
        let a = integrate(&p, &cfg, &Increments::zeros(1, 10)).unwrap();
        let b = integrate_inherent(&p, &cfg, &Increments::zeros(1, 10)).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert!((x[0] - y[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_examples_agree_with_stepper() {
        for label in ["example51", "example52"] {
            let p = builtin(label).unwrap();
            let delta = 2f64.powi(-8);
            let cfg = ThetaConfig::new(1.0, delta);
            let zeros = Increments::zeros(p.m, 256);
            let a = integrate(&p, &cfg, &zeros).unwrap();
            let b = integrate_inherent(&p, &cfg, &zeros).unwrap();
            let diff = norm2(&sub_vec(a.terminal(), b.terminal()));
            assert!(diff <= 10.0 * delta, "{label}: {diff}");
            assert!(b.max_constraint_residual() < 1e-10);
        }
    }
}
