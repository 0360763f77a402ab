//! Damped Newton–Raphson for small square systems.

use crate::linalg::{norm_inf, LinalgError, Lu, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Step shrink factor applied on each backtrack.
    pub damping: f64,
    pub max_backtracks: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_iter: 50,
            damping: 0.5,
            max_backtracks: 20,
        }
    }
}

impl NewtonConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    pub fn is_valid(&self) -> bool {
        self.tol > 0.0
            && self.max_iter >= 1
            && self.damping > 0.0
            && self.damping < 1.0
    }
}

/// Why an iteration stopped without converging.
#[derive(Debug, Clone, PartialEq)]
pub enum NewtonFailure {
    MaxIterations,
    SingularJacobian(LinalgError),
    NonFiniteResidual,
    /// No backtracked step reduced the residual norm.
    LineSearchStalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub solution: Vec<f64>,
    /// Number of accepted corrections larger than the step tolerance.
    pub iterations: usize,
    pub final_residual_norm: f64,
    pub converged: bool,
    pub failure: Option<NewtonFailure>,
    /// `‖residual‖∞` at each iterate, starting from `x_init`.
    pub residual_history: Vec<f64>,
}

/// Solves `residual(x) = 0` starting from `x_init`.
///
/// Converged means the last Newton correction satisfies `‖δ‖∞ ≤ tol` while
/// `‖residual‖∞ ≤ 10·tol`; that final correction is applied but not counted
/// as an iteration, so an affine system takes exactly one iteration. Steps
/// are halved (by `damping`) until the residual norm does not increase.
pub fn newton_solve<R, J>(residual: R, jacobian: J, x_init: &[f64], cfg: &NewtonConfig) -> NewtonOutcome
where
    R: Fn(&[f64]) -> Vec<f64>,
    J: Fn(&[f64]) -> Matrix,
{
    let mut x = x_init.to_vec();
    let mut r = residual(&x);
    let mut r_norm = norm_inf(&r);
    let mut history = vec![r_norm];
    let mut iterations = 0;

    let finish = |x: Vec<f64>, r_norm: f64, iterations, failure: Option<NewtonFailure>, history| {
        NewtonOutcome {
            solution: x,
            iterations,
            final_residual_norm: r_norm,
            converged: failure.is_none(),
            failure,
            residual_history: history,
        }
    };

    loop {
        if !r_norm.is_finite() {
            return finish(x, r_norm, iterations, Some(NewtonFailure::NonFiniteResidual), history);
        }
        let jac = jacobian(&x);
        let lu = match Lu::factor(&jac) {
            Ok(lu) => lu,
            Err(e) => {
                return finish(x, r_norm, iterations, Some(NewtonFailure::SingularJacobian(e)), history)
            }
        };
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let dx = lu.solve(&neg_r);
        let dx_norm = norm_inf(&dx);

        if dx_norm <= cfg.tol && r_norm <= 10.0 * cfg.tol {
            let polished: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let r_pol = residual(&polished);
            let r_pol_norm = norm_inf(&r_pol);
            if r_pol_norm.is_finite() && r_pol_norm <= r_norm {
                history.push(r_pol_norm);
                return finish(polished, r_pol_norm, iterations, None, history);
            }
            return finish(x, r_norm, iterations, None, history);
        }
        if iterations >= cfg.max_iter {
            return finish(x, r_norm, iterations, Some(NewtonFailure::MaxIterations), history);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + alpha * b).collect();
            let r_trial = residual(&trial);
            let n_trial = norm_inf(&r_trial);
            if n_trial.is_finite() && n_trial <= r_norm {
                accepted = Some((trial, r_trial, n_trial));
                break;
            }
            alpha *= cfg.damping;
        }
        match accepted {
            Some((trial, r_trial, n_trial)) => {
                x = trial;
                r = r_trial;
                r_norm = n_trial;
                iterations += 1;
                history.push(r_norm);
            }
            None => {
                return finish(x, r_norm, iterations, Some(NewtonFailure::LineSearchStalled), history)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        assert!(f(lo) * f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn affine_scalar_in_one_iteration() {
        let out = newton_solve(
            |x| vec![x[0] - 2.0],
            |_| Matrix::identity(1),
            &[0.0],
            &NewtonConfig::default(),
        );
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert_eq!(out.solution, vec![2.0]);
    }

    #[test]
    fn cubic_root_matches_bisection() {
        let oracle = bisect(|x| x * x * x - 8.0, 0.0, 4.0);
        let out = newton_solve(
            |x| vec![x[0].powi(3) - 8.0],
            |x| Matrix::from_rows(&[[3.0 * x[0] * x[0]]]),
            &[1.0],
            &NewtonConfig::default(),
        );
        assert!(out.converged);
        assert!((out.solution[0] - oracle).abs() <= 1e-5);
        assert!((oracle - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_dimensional_matches_elimination_oracle() {
        // x₂ = 4 from the second equation; x₁ then solves x₁² = 4 on [0, 4].
        let x1 = bisect(|s| s * s - 4.0, 0.0, 4.0);
        let out = newton_solve(
            |x| vec![x[0] * x[0] - x[1], x[1] - 4.0],
            |x| Matrix::from_rows(&[[2.0 * x[0], -1.0], [0.0, 1.0]]),
            &[1.5, 3.0],
            &NewtonConfig::default(),
        );
        assert!(out.converged);
        assert!((out.solution[0] - x1).abs() <= 1e-5);
        assert!((out.solution[1] - 4.0).abs() <= 1e-5);
    }

    #[test]
    fn quadratic_local_convergence() {
        let out = newton_solve(
            |x| vec![x[0].powi(3) - 8.0],
            |x| Matrix::from_rows(&[[3.0 * x[0] * x[0]]]),
            &[2.1],
            &NewtonConfig::with_tol(1e-14),
        );
        let h = &out.residual_history;
        assert!(h.len() >= 4, "{h:?}");
        for k in 0..2 {
            // e_{k+1} ≤ C e_k² with C from the cubic's second derivative scale.
            assert!(h[k + 1] <= h[k] * h[k].max(1e-300) * 0.5 + 1e-13, "{h:?}");
        }
    }

    #[test]
    fn singular_jacobian_is_reported() {
        let out = newton_solve(
            |x| vec![x[0] * x[0] + 1.0],
            |x| Matrix::from_rows(&[[2.0 * x[0]]]),
            &[0.0],
            &NewtonConfig::default(),
        );
        assert!(!out.converged);
        assert!(matches!(out.failure, Some(NewtonFailure::SingularJacobian(_))));
        assert_eq!(out.solution, vec![0.0]);
    }

    #[test]
    fn nan_residual_fails_immediately() {
        let out = newton_solve(
            |_| vec![f64::NAN],
            |_| Matrix::identity(1),
            &[0.0],
            &NewtonConfig::default(),
        );
        assert_eq!(out.failure, Some(NewtonFailure::NonFiniteResidual));
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn no_real_root_does_not_claim_convergence() {
        let out = newton_solve(
            |x| vec![x[0] * x[0] + 1.0],
            |x| Matrix::from_rows(&[[2.0 * x[0]]]),
            &[0.5],
            &NewtonConfig::default(),
        );
        assert!(!out.converged);
        assert!(out.failure.is_some());
    }

    #[test]
    fn damping_handles_overshoot() {
        // atan has a small basin for plain Newton; backtracking reaches the root from far out.
        let out = newton_solve(
            |x| vec![x[0].atan()],
            |x| Matrix::from_rows(&[[1.0 / (1.0 + x[0] * x[0])]]),
            &[3.0],
            &NewtonConfig::default(),
        );
        assert!(out.converged, "{out:?}");
        assert!(out.solution[0].abs() < 1e-5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn linear_systems_converge_in_one_iteration(
                diag in proptest::collection::vec(1.0f64..5.0, 3),
                off in proptest::collection::vec(-0.5f64..0.5, 6),
                c in proptest::collection::vec(-10.0f64..10.0, 3),
            ) {
                let b = Matrix::from_rows(&[
                    [diag[0], off[0], off[1]],
                    [off[2], diag[1], off[3]],
                    [off[4], off[5], diag[2]],
                ]);
                let b2 = b.clone();
                let c2 = c.clone();
                let out = newton_solve(
                    move |x| b2.mul_vec(x).iter().zip(&c2).map(|(a, b)| a - b).collect(),
                    |_| b.clone(),
                    &[0.0; 3],
                    &NewtonConfig::default(),
                );
                prop_assert!(out.converged);
                prop_assert_eq!(out.iterations, 1);
            }

            #[test]
            fn residual_history_is_monotone(x0 in -20.0f64..20.0, target in 0.5f64..30.0) {
                let out = newton_solve(
                    |x| vec![x[0].powi(3) + x[0] - target],
                    |x| Matrix::from_rows(&[[3.0 * x[0] * x[0] + 1.0]]),
                    &[x0],
                    &NewtonConfig::default(),
                );
                prop_assert!(out.converged);
                for w in out.residual_history.windows(2) {
                    prop_assert!(w[1] <= w[0]);
                }
            }
        }
    }
}
