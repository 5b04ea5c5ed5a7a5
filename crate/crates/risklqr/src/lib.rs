//! Risk-constrained linear-quadratic regulation.
//!
//! Synthesizes state-feedback controllers for the stochastic plant
//! x_{t+1} = A x_t + B u_t + w_{t+1} that minimize the expected quadratic
//! cost subject to a budget on the cumulative expected predictive variance of
//! the stage penalty. The constrained problem reduces to a quadratically
//! constrained LQR in the noise statistics (w̄, W, M3, m4); for a fixed
//! multiplier μ the optimal policy is affine, u_t = K_t x_t + l_t + h_t,
//! computable by a Riccati-style backward pass with the inflated penalty
//! Q_μ = Q + 4μ·QcWQc, and the optimal μ* is found by bisection on the
//! (monotone) achieved risk.
//!
//! Module layout:
//! - [`model`]: plant/cost/noise descriptors and standing-assumption checks;
//! - [`moments`]: exact noise statistics per distribution family, plus the
//!   deterministic sampling oracle;
//! - [`riccati`]: the μ-parameterized backward pass, its steady-state limit,
//!   and the dual value;
//! - [`risk_dual`]: risk evaluation, cost evaluation, dual bisection, and KKT
//!   certification;
//! - [`sim`]: Monte Carlo rollouts and empirical statistics.

pub mod error;
#[cfg(test)]
pub(crate) mod fixtures;
pub mod model;
pub mod moments;
pub mod riccati;
pub mod risk_dual;
pub mod sim;

pub use error::{Error, Result};
pub use model::{
    spectral_radius, validate, CostSpec, MixtureComponent, NoiseSpec, SystemModel,
    ValidationReport,
};
pub use moments::{empirical_stats, noise_stats, sample, NoiseStats};
pub use riccati::{
    backward_pass, dual_value, inflated_penalty, steady_state, AffinePolicy, SteadyStatePolicy,
};
pub use risk_dual::{
    epsilon_bar, kkt_certificate, lagrangian_eval, lqr_cost, moment_propagation, risk_value,
    risk_value_by_moments, solve_risk_constrained, solve_with_eps_bar, BisectionOptions,
    KktReport, KktTolerances, RiskEvaluation, RiskMethod, Solution, SolveStatus, StateMoments,
};
pub use sim::{empirical_cdf, estimate, rollout, EstimateReport, Trajectory};
