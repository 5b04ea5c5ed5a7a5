//! Evaluation of the risk functional J_R and the LQR cost J under a fixed
//! affine policy, the dual bisection for the optimal multiplier μ*, and KKT
//! certification of the returned solution.
//!
//! J_R(u) = Σ_{t=1}^N E[4·x_t'QcWQc x_t + 4·x_t'QcM3] is the
//! constraint functional after the predictive-variance constraint is rewritten
//! in the noise statistics; the budget comparison uses its shifted bound
//! ε̄ = ε - N·m4 + 4N·Tr((WQc)²). Both a backward recursion and a
//! moment-propagation evaluation of J_R are provided; they agree to rounding
//! and serve as mutual oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{symmetrize, CostSpec, SystemModel};
use crate::moments::{check_stats_weighting, NoiseStats};
use crate::riccati::{backward_pass, dual_value_from_policy, AffinePolicy};

/// How a [`RiskEvaluation`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskMethod {
    /// Backward recursion in (P_t, z_t, r_t).
    Recursion,
    /// Forward propagation of closed-loop means and covariances.
    MomentPropagation,
}

/// Value of the risk functional under a fixed policy. `p0`, `z0`, `r0` are
/// the stage-0 outputs of the backward recursion (zero for the
/// moment-propagation method, which has no such intermediates); `jr` is the
/// reported functional with the deterministic stage-0 terms removed, i.e.
/// exactly the t = 1..N sum.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEvaluation {
    pub p0: DMatrix<f64>,
    pub z0: DVector<f64>,
    pub r0: f64,
    pub jr: f64,
    pub method: RiskMethod,
}

/// Closed-loop first and second moments m_t = E x_t, Σ_t = Cov x_t for
/// t = 0..N under a fixed affine policy.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMoments {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

/// Outcome class of [`solve_risk_constrained`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// The risk-neutral policy already meets the budget; μ* = 0.
    OptimalInterior,
    /// The constraint is tight at the returned μ*.
    OptimalActive,
    /// The budget lies below the achievable risk within the μ cap; the
    /// solution carries the most risk-averse policy evaluated and its trace.
    Infeasible,
}

/// The three KKT gaps of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// L(u, μ*) - D(μ*); zero at an exact saddle point.
    pub stationarity_gap: f64,
    /// max(0, J_R - ε̄).
    pub primal_feasibility: f64,
    /// |μ*·(J_R - ε̄)|.
    pub complementary_slackness: f64,
    pub passed: bool,
}

/// Pass thresholds for [`kkt_certificate`]; each is scaled by the magnitude
/// of the quantity it bounds (1 + |ε̄| for the primal gaps, 1 + |D(μ*)| for
/// stationarity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktTolerances {
    pub stationarity: f64,
    pub feasibility: f64,
    pub slackness: f64,
}

impl Default for KktTolerances {
    fn default() -> Self {
        Self {
            stationarity: 1e-6,
            feasibility: 1e-6,
            slackness: 1e-6,
        }
    }
}

/// Bracketing and convergence controls for the μ bisection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisectionOptions {
    /// Largest multiplier considered before declaring the budget infeasible.
    pub mu_max: f64,
    /// Relative bracket width at which bisection stops.
    pub tol_rel: f64,
    /// Cap on the bracket-discovery doublings from μ = 1.
    pub max_doublings: usize,
}

impl Default for BisectionOptions {
    fn default() -> Self {
        Self {
            mu_max: 1e12,
            tol_rel: 1e-9,
            max_doublings: 60,
        }
    }
}

/// Output of the constrained solver.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub mu_star: f64,
    pub policy: AffinePolicy,
    /// Achieved expected quadratic cost J.
    pub j: f64,
    /// Achieved risk functional J_R.
    pub jr: f64,
    pub eps_bar: f64,
    pub status: SolveStatus,
    pub kkt: KktReport,
    /// Every (μ, J_R(u*(μ))) evaluation in the order visited; for infeasible
    /// budgets this shows the limiting risk as μ grows.
    pub trace: Vec<(f64, f64)>,
}

/// The shifted budget ε̄ = ε - N·m4 + 4N·Tr((WQc)²). May legitimately be
/// negative, since J_R contains signed linear terms.
pub fn epsilon_bar(
    epsilon: f64,
    horizon: usize,
    stats: &NoiseStats,
    qc: &DMatrix<f64>,
) -> Result<f64> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidInput(format!(
            "risk budget must be finite and >= 0, got {epsilon}"
        )));
    }
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be >= 1".into()));
    }
    check_stats_weighting(stats, qc)?;
    let wqc = &stats.cov * qc;
    let n = horizon as f64;
    Ok(epsilon - n * stats.m4 + 4.0 * n * (&wqc * &wqc).trace())
}

/// Evaluate J_R by the backward recursion in (P_t, z_t, r_t).
///
/// The recursion naturally accumulates the deterministic t = 0 terms
/// 4·x0'QcWQc x0 + 4·x0'QcM3 as well; they are subtracted so `jr` is exactly
/// the t = 1..N functional the budget constrains.
pub fn risk_value(
    policy: &AffinePolicy,
    model: &SystemModel,
    stats: &NoiseStats,
    qc: &DMatrix<f64>,
) -> Result<RiskEvaluation> {
    policy.check_against(model)?;
    check_stats_weighting(stats, qc)?;
    check_noise_dims(model, stats)?;
    let n_stages = policy.horizon();
    let a = &model.a;
    let b = &model.b;
    let w = &stats.cov;
    let m3 = &stats.m3;
    let wbar = &stats.mean;

    let qcwqc4 = symmetrize(&(4.0 * (qc * w * qc)));
    let qcm3_4 = 4.0 * (qc * m3);

    let mut p = qcwqc4.clone();
    let mut z = qcm3_4.clone();
    let mut r = 0.0;
    for t in (1..=n_stages).rev() {
        let phi = a + b * &policy.gains[t - 1];
        let drift = b * (&policy.offsets_l[t - 1] + &policy.offsets_h[t - 1]) + wbar;
        let p_drift = &p * &drift;
        let r_prev = r + (&p * w).trace() + z.dot(&drift) + drift.dot(&p_drift);
        let z_prev = phi.transpose() * &z + &qcm3_4 + 2.0 * (phi.transpose() * &p_drift);
        let p_prev = symmetrize(&(phi.transpose() * &p * &phi + &qcwqc4));
        p = p_prev;
        z = z_prev;
        r = r_prev;
    }

    let x0 = &model.x0;
    let stage0 = x0.dot(&(&qcwqc4 * x0)) + qcm3_4.dot(x0);
    let jr = x0.dot(&(&p * x0)) + z.dot(x0) + r - stage0;
    Ok(RiskEvaluation {
        p0: p,
        z0: z,
        r0: r,
        jr,
        method: RiskMethod::Recursion,
    })
}

/// Evaluate J_R by propagating closed-loop moments:
/// J_R = Σ_{t=1}^N [4(Tr(QcWQc Σ_t) + m_t'QcWQc m_t) + 4 m_t'QcM3].
/// Independent oracle for [`risk_value`].
pub fn risk_value_by_moments(
    policy: &AffinePolicy,
    model: &SystemModel,
    stats: &NoiseStats,
    qc: &DMatrix<f64>,
) -> Result<RiskEvaluation> {
    check_stats_weighting(stats, qc)?;
    let moments = moment_propagation(policy, model, stats)?;
    let qcwqc = symmetrize(&(qc * &stats.cov * qc));
    let qcm3 = qc * &stats.m3;
    let mut jr = 0.0;
    for t in 1..=policy.horizon() {
        let m = &moments.means[t];
        jr += 4.0 * ((&qcwqc * &moments.covs[t]).trace() + m.dot(&(&qcwqc * m)))
            + 4.0 * m.dot(&qcm3);
    }
    let n = model.state_dim();
    Ok(RiskEvaluation {
        p0: DMatrix::zeros(n, n),
        z0: DVector::zeros(n),
        r0: 0.0,
        jr,
        method: RiskMethod::MomentPropagation,
    })
}

/// Closed-loop moments under a fixed policy: m_0 = x0, Σ_0 = 0,
/// m_{t+1} = (A + BK_t)m_t + B(l_t + h_t) + w̄,
/// Σ_{t+1} = (A + BK_t)Σ_t(A + BK_t)' + W.
pub fn moment_propagation(
    policy: &AffinePolicy,
    model: &SystemModel,
    stats: &NoiseStats,
) -> Result<StateMoments> {
    policy.check_against(model)?;
    check_noise_dims(model, stats)?;
    let n = model.state_dim();
    let n_stages = policy.horizon();
    let mut means = Vec::with_capacity(n_stages + 1);
    let mut covs = Vec::with_capacity(n_stages + 1);
    means.push(model.x0.clone());
    covs.push(DMatrix::zeros(n, n));
    for t in 0..n_stages {
        let phi = &model.a + &model.b * &policy.gains[t];
        let m_next =
            &phi * &means[t] + &model.b * (&policy.offsets_l[t] + &policy.offsets_h[t]) + &stats.mean;
        let s_next = symmetrize(&(&phi * &covs[t] * phi.transpose() + &stats.cov));
        means.push(m_next);
        covs.push(s_next);
    }
    Ok(StateMoments { means, covs })
}

/// Expected quadratic cost J of a fixed affine policy, from the closed-loop
/// moments:
/// J = Σ_{t=0}^N [Tr(QΣ_t) + m_t'Q m_t]
///   + Σ_{t=0}^{N-1} [Tr(K_t Σ_t K_t'R) + (K_t m_t + l_t + h_t)'R(...)].
pub fn lqr_cost(
    policy: &AffinePolicy,
    model: &SystemModel,
    stats: &NoiseStats,
    cost: &CostSpec,
) -> Result<f64> {
    if cost.q.nrows() != model.state_dim() || cost.r.nrows() != model.input_dim() {
        return Err(Error::Dimension(
            "cost matrices do not match the model dimensions".into(),
        ));
    }
    let moments = moment_propagation(policy, model, stats)?;
    let n_stages = policy.horizon();
    let mut j = 0.0;
    for t in 0..=n_stages {
        let m = &moments.means[t];
        j += (&cost.q * &moments.covs[t]).trace() + m.dot(&(&cost.q * m));
    }
    for t in 0..n_stages {
        let k = &policy.gains[t];
        let u_mean = k * &moments.means[t] + &policy.offsets_l[t] + &policy.offsets_h[t];
        j += (k * &moments.covs[t] * k.transpose() * &cost.r).trace()
            + u_mean.dot(&(&cost.r * &u_mean));
    }
    Ok(j)
}

/// L(u, μ) = J(u) + μ·J_R(u) - μ·ε̄.
pub fn lagrangian_eval(
    policy: &AffinePolicy,
    model: &SystemModel,
    stats: &NoiseStats,
    cost: &CostSpec,
    mu: f64,
    eps_bar: f64,
) -> Result<f64> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::InvalidInput(format!(
            "multiplier must be finite and >= 0, got {mu}"
        )));
    }
    if !eps_bar.is_finite() {
        return Err(Error::InvalidInput("eps_bar must be finite".into()));
    }
    let j = lqr_cost(policy, model, stats, cost)?;
    let jr = risk_value(policy, model, stats, &cost.qc)?.jr;
    Ok(j + mu * jr - mu * eps_bar)
}

/// Solve the risk-constrained problem with the budget taken from
/// `cost.epsilon` (converted to ε̄ internally).
pub fn solve_risk_constrained(
    model: &SystemModel,
    cost: &CostSpec,
    stats: &NoiseStats,
    options: &BisectionOptions,
) -> Result<Solution> {
    let n_stages = model.require_horizon()?;
    let eps_bar = epsilon_bar(cost.epsilon, n_stages, stats, &cost.qc)?;
    solve_with_eps_bar(model, cost, stats, eps_bar, options)
}

/// Solve with the budget given directly as ε̄.
///
/// If the risk-neutral policy meets the budget, μ* = 0 (interior optimum).
/// Otherwise μ doubles from 1 until the budget is met or `mu_max` is reached
/// — J_R(u*(μ)) is nonincreasing in μ, which the solver asserts on every
/// evaluated pair — then bisection shrinks the bracket to relative width
/// `tol_rel` and the feasible endpoint is returned with its KKT certificate.
pub fn solve_with_eps_bar(
    model: &SystemModel,
    cost: &CostSpec,
    stats: &NoiseStats,
    eps_bar: f64,
    options: &BisectionOptions,
) -> Result<Solution> {
    if !eps_bar.is_finite() {
        return Err(Error::InvalidInput("eps_bar must be finite".into()));
    }
    if options.mu_max <= 1.0 || !options.mu_max.is_finite() {
        return Err(Error::InvalidInput(format!(
            "mu_max must be finite and > 1, got {}",
            options.mu_max
        )));
    }
    if !options.tol_rel.is_finite() || options.tol_rel <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "tol_rel must be finite and > 0, got {}",
            options.tol_rel
        )));
    }

    let mut trace: Vec<(f64, f64)> = Vec::new();
    let mut eval = |mu: f64| -> Result<(AffinePolicy, f64)> {
        let policy = backward_pass(model, cost, stats, mu)?;
        let jr = risk_value(&policy, model, stats, &cost.qc)?.jr;
        trace.push((mu, jr));
        Ok((policy, jr))
    };
    let mono_violation = |jr_lo: f64, jr_hi: f64| {
        // J_R at the larger μ must not exceed J_R at the smaller one.
        jr_hi > jr_lo + 1e-9 * (1.0 + jr_lo.abs().max(jr_hi.abs()))
    };

    let (policy0, jr0) = eval(0.0)?;
    if jr0 <= eps_bar {
        return finish_solution(
            model, cost, stats, policy0, 0.0, eps_bar, SolveStatus::OptimalInterior, trace,
        );
    }

    // Bracket discovery: double from μ = 1 up to mu_max.
    let mut lo = 0.0;
    let mut jr_lo = jr0;
    let mut hi: Option<(f64, AffinePolicy, f64)> = None;
    let mut last_infeasible: Option<(f64, AffinePolicy)> = None;
    let mut mu = 1.0_f64;
    for _ in 0..=options.max_doublings {
        let (policy, jr_mu) = eval(mu)?;
        if mono_violation(jr_lo, jr_mu) {
            return Err(Error::Numerical(format!(
                "risk is not monotone in the multiplier: J_R({lo}) = {jr_lo:.6e} but \
                 J_R({mu}) = {jr_mu:.6e}"
            )));
        }
        if jr_mu <= eps_bar {
            hi = Some((mu, policy, jr_mu));
            break;
        }
        lo = mu;
        jr_lo = jr_mu;
        last_infeasible = Some((mu, policy));
        if mu >= options.mu_max {
            break;
        }
        mu = (mu * 2.0).min(options.mu_max);
    }

    let Some((mut hi_mu, mut hi_policy, mut jr_hi)) = hi else {
        let (mu_last, policy) = last_infeasible.expect("at least one doubling evaluation");
        return finish_solution(
            model, cost, stats, policy, mu_last, eps_bar, SolveStatus::Infeasible, trace,
        );
    };

    // Bisection on [lo, hi]: J_R(lo) > ε̄ >= J_R(hi).
    while hi_mu - lo > options.tol_rel * (1.0 + hi_mu) {
        let mid = 0.5 * (lo + hi_mu);
        let (policy, jr_mid) = eval(mid)?;
        if mono_violation(jr_lo, jr_mid) || mono_violation(jr_mid, jr_hi) {
            return Err(Error::Numerical(format!(
                "risk is not monotone in the multiplier near μ = {mid:.6e}"
            )));
        }
        if jr_mid <= eps_bar {
            hi_mu = mid;
            hi_policy = policy;
            jr_hi = jr_mid;
        } else {
            lo = mid;
            jr_lo = jr_mid;
        }
    }

    finish_solution(
        model, cost, stats, hi_policy, hi_mu, eps_bar, SolveStatus::OptimalActive, trace,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_solution(
    model: &SystemModel,
    cost: &CostSpec,
    stats: &NoiseStats,
    policy: AffinePolicy,
    mu_star: f64,
    eps_bar: f64,
    status: SolveStatus,
    trace: Vec<(f64, f64)>,
) -> Result<Solution> {
    let j = lqr_cost(&policy, model, stats, cost)?;
    let jr = risk_value(&policy, model, stats, &cost.qc)?.jr;
    let kkt = certify(
        model,
        cost,
        stats,
        &policy,
        mu_star,
        eps_bar,
        &KktTolerances::default(),
    )?;
    Ok(Solution {
        mu_star,
        policy,
        j,
        jr,
        eps_bar,
        status,
        kkt,
        trace,
    })
}

/// Recompute the KKT gaps of a solution from its policy: primal feasibility,
/// complementary slackness, and the saddle gap between the direct Lagrangian
/// value and the dual value at μ*.
pub fn kkt_certificate(
    model: &SystemModel,
    cost: &CostSpec,
    stats: &NoiseStats,
    solution: &Solution,
    tolerances: &KktTolerances,
) -> Result<KktReport> {
    certify(
        model,
        cost,
        stats,
        &solution.policy,
        solution.mu_star,
        solution.eps_bar,
        tolerances,
    )
}

fn certify(
    model: &SystemModel,
    cost: &CostSpec,
    stats: &NoiseStats,
    policy: &AffinePolicy,
    mu_star: f64,
    eps_bar: f64,
    tolerances: &KktTolerances,
) -> Result<KktReport> {
    let jr = risk_value(policy, model, stats, &cost.qc)?.jr;
    let j = lqr_cost(policy, model, stats, cost)?;
    let primal_feasibility = (jr - eps_bar).max(0.0);
    let complementary_slackness = if mu_star == 0.0 {
        0.0
    } else {
        (mu_star * (jr - eps_bar)).abs()
    };
    let lagrangian = j + mu_star * jr - mu_star * eps_bar;
    let optimal = backward_pass(model, cost, stats, mu_star)?;
    let dual = dual_value_from_policy(model, cost, stats, &optimal, eps_bar)?;
    let stationarity_gap = lagrangian - dual;

    let primal_scale = 1.0 + eps_bar.abs();
    let dual_scale = 1.0 + dual.abs();
    let passed = primal_feasibility <= tolerances.feasibility * primal_scale
        && complementary_slackness <= tolerances.slackness * primal_scale
        && stationarity_gap.abs() <= tolerances.stationarity * dual_scale;
    Ok(KktReport {
        stationarity_gap,
        primal_feasibility,
        complementary_slackness,
        passed,
    })
}

fn check_noise_dims(model: &SystemModel, stats: &NoiseStats) -> Result<()> {
    let n = model.state_dim();
    if stats.mean.len() != n || stats.cov.nrows() != n || stats.m3.len() != n {
        return Err(Error::Dimension(format!(
            "noise statistics must have dimension {n}"
        )));
    }
    Ok(())
}
