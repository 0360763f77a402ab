//! Stochastic theta methods for index-1 stochastic differential algebraic
//! equations `A_t dX = F(t, X) dt + G(t, X) dW` with singular, possibly
//! time-varying `A_t`, plus a Monte Carlo harness for strong convergence.

pub mod experiment;
pub mod inherent;
pub mod linalg;
pub mod newton;
pub mod paths;
pub mod problem;
pub mod stepper;

pub use linalg::{Matrix, ProjectorBundle, SvdFactors};
pub use newton::{NewtonConfig, NewtonOutcome};
pub use paths::{BrownianLattice, Increments};
pub use problem::{builtin, ProblemConstants, SdaeProblem};
pub use stepper::{integrate, ThetaConfig, ThetaIntegrator, Trajectory};
