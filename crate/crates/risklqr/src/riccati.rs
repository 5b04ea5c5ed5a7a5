//! The μ-parameterized Riccati machinery: finite-horizon backward pass,
//! steady-state limit by value iteration, and the dual value D(μ).
//!
//! For a fixed multiplier μ ≥ 0 the Lagrangian of the risk-constrained
//! problem is itself an LQR with the inflated penalty Q_μ = Q + 4μ·QcWQc and
//! a linear stage term 4μ·x'QcM3; its minimizer is affine,
//! u_t = K_t x_t + l_t + h_t, with K driven by the usual quadratic recursion,
//! l tracking the third-moment direction M3, and h compensating a nonzero
//! noise mean.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{spectral_radius, symmetrize, CostSpec, SystemModel};
use crate::moments::{check_stats_weighting, NoiseStats};

/// Default fixed-point tolerance for [`steady_state`].
pub const DEFAULT_ARE_TOL: f64 = 1e-12;
/// Default iteration cap for [`steady_state`].
pub const DEFAULT_ARE_MAX_ITER: usize = 100_000;

/// Time-varying affine control law u_t = K_t x_t + l_t + h_t together with
/// the value-function pieces produced by the backward pass: for each stage,
/// the cost-to-go of the μ-Lagrangian is
/// x'V_t x + 4μ·M3'S_t'x + 2·w̄'T_t'x + c_t.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    /// K_t, p x n, for t = 0..N-1.
    pub gains: Vec<DMatrix<f64>>,
    /// l_t (third-moment tracking offsets), t = 0..N-1.
    pub offsets_l: Vec<DVector<f64>>,
    /// h_t (mean-compensation offsets), t = 0..N-1.
    pub offsets_h: Vec<DVector<f64>>,
    /// V_t, t = 0..N.
    pub values_v: Vec<DMatrix<f64>>,
    /// S_t, t = 0..N.
    pub values_s: Vec<DMatrix<f64>>,
    /// T_t, t = 0..N.
    pub values_t: Vec<DMatrix<f64>>,
    /// c_t, t = 0..N.
    pub constants_c: Vec<f64>,
    /// The multiplier the policy was synthesized for.
    pub mu: f64,
    /// True when every stage carries converged stationary quantities rather
    /// than a genuine finite-horizon pass.
    pub steady: bool,
}

impl AffinePolicy {
    /// Number of control stages N.
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn state_dim(&self) -> usize {
        self.gains.first().map_or(0, |k| k.ncols())
    }

    pub fn input_dim(&self) -> usize {
        self.gains.first().map_or(0, |k| k.nrows())
    }

    /// The control applied at stage t in state x.
    pub fn control(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.gains[t] * x + &self.offsets_l[t] + &self.offsets_h[t]
    }

    /// Check internal shape consistency and compatibility with a model.
    pub fn check_against(&self, model: &SystemModel) -> Result<()> {
        let n = model.state_dim();
        let p = model.input_dim();
        let horizon = self.horizon();
        if horizon == 0 {
            return Err(Error::InvalidInput("policy has no stages".into()));
        }
        if let Some(model_n) = model.horizon {
            if model_n != horizon {
                return Err(Error::Dimension(format!(
                    "policy covers {horizon} stages but the model horizon is {model_n}"
                )));
            }
        }
        if self.offsets_l.len() != horizon
            || self.offsets_h.len() != horizon
            || self.values_v.len() != horizon + 1
            || self.values_s.len() != horizon + 1
            || self.values_t.len() != horizon + 1
            || self.constants_c.len() != horizon + 1
        {
            return Err(Error::Dimension(
                "policy stage lists have inconsistent lengths".into(),
            ));
        }
        for k in &self.gains {
            if k.nrows() != p || k.ncols() != n {
                return Err(Error::Dimension(format!(
                    "gain must be {p}x{n}, got {}x{}",
                    k.nrows(),
                    k.ncols()
                )));
            }
        }
        if self.offsets_l.iter().chain(&self.offsets_h).any(|v| v.len() != p) {
            return Err(Error::Dimension(format!("offsets must have length {p}")));
        }
        if self
            .values_v
            .iter()
            .chain(&self.values_s)
            .chain(&self.values_t)
            .any(|m| m.nrows() != n || m.ncols() != n)
        {
            return Err(Error::Dimension(format!("value matrices must be {n}x{n}")));
        }
        Ok(())
    }
}

/// Stationary limits of the backward recursions at a fixed μ.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStatePolicy {
    pub v: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub l: DVector<f64>,
    pub h: DVector<f64>,
    /// Value-iteration steps taken.
    pub iterations: usize,
    /// Final fixed-point gap ‖V_{k+1} - V_k‖_max.
    pub residual: f64,
    /// The multiplier the policy was synthesized for.
    pub mu: f64,
}

impl SteadyStatePolicy {
    /// Replicate the stationary law over a finite horizon. All stages carry
    /// the converged quantities (and zero constants), so the expansion is the
    /// stationary control law, not a finite-horizon value function.
    pub fn expand(&self, horizon: usize) -> AffinePolicy {
        AffinePolicy {
            gains: vec![self.k.clone(); horizon],
            offsets_l: vec![self.l.clone(); horizon],
            offsets_h: vec![self.h.clone(); horizon],
            values_v: vec![self.v.clone(); horizon + 1],
            values_s: vec![self.s.clone(); horizon + 1],
            values_t: vec![self.t.clone(); horizon + 1],
            constants_c: vec![0.0; horizon + 1],
            mu: self.mu,
            steady: true,
        }
    }

    /// The stationary control offset l + h.
    pub fn offset(&self) -> DVector<f64> {
        &self.l + &self.h
    }
}

/// The inflated state penalty Q_μ = Q + 4μ·QWQ, symmetrized.
pub fn inflated_penalty(q: &DMatrix<f64>, w: &DMatrix<f64>, mu: f64) -> Result<DMatrix<f64>> {
    inflate(q, q, w, mu)
}

/// General form Q + 4μ·Qc W Qc used when the constraint weighting differs
/// from the stage penalty.
fn inflate(
    q: &DMatrix<f64>,
    qc: &DMatrix<f64>,
    w: &DMatrix<f64>,
    mu: f64,
) -> Result<DMatrix<f64>> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::InvalidInput(format!(
            "multiplier must be finite and >= 0, got {mu}"
        )));
    }
    let n = q.nrows();
    if !q.is_square() || !qc.is_square() || !w.is_square() || qc.nrows() != n || w.nrows() != n {
        return Err(Error::Dimension(format!(
            "penalty inflation needs {n}x{n} operands, got Qc {}x{}, W {}x{}",
            qc.nrows(),
            qc.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(symmetrize(&(q + 4.0 * mu * (qc * w * qc))))
}

struct StepOutput {
    v_prev: DMatrix<f64>,
    k: DMatrix<f64>,
    s_prev: DMatrix<f64>,
    t_prev: DMatrix<f64>,
    l: DVector<f64>,
    h: DVector<f64>,
    c_prev: f64,
}

/// One backward step of all seven recursions from stage-t values.
#[allow(clippy::too_many_arguments)]
fn backward_step(
    model: &SystemModel,
    cost: &CostSpec,
    stats: &NoiseStats,
    mu: f64,
    q_mu: &DMatrix<f64>,
    v: &DMatrix<f64>,
    s: &DMatrix<f64>,
    t_mat: &DMatrix<f64>,
    c: f64,
) -> Result<StepOutput> {
    let a = &model.a;
    let b = &model.b;
    let wbar = &stats.mean;
    let w = &stats.cov;
    let m3 = &stats.m3;

    let btv = b.transpose() * v; // B'V_t
    let g = symmetrize(&(&btv * b + &cost.r)); // B'V_tB + R
    let chol = Cholesky::new(g.clone()).ok_or_else(|| {
        Error::Numerical("B'VB + R is not positive definite; check that R is".into())
    })?;

    let btva = &btv * a;
    let k = -chol.solve(&btva);
    let v_prev = symmetrize(&(a.transpose() * v * a + q_mu + btva.transpose() * &k));
    let phi_t = (a + b * &k).transpose();

    let s_prev = &phi_t * s + &cost.qc;
    let t_prev = &phi_t * (t_mat + v);
    let l = -2.0 * mu * chol.solve(&(b.transpose() * s * m3));
    let h = -chol.solve(&(b.transpose() * (v + t_mat) * wbar));

    // The linear-term weight in the constant is the stage value S_t, matching
    // the other stage-indexed terms; an end-anchored weight here breaks the
    // agreement between the dual value and direct Lagrangian evaluation
    // whenever both the noise mean and μ·M3 are nonzero.
    let lh = &l + &h;
    let c_prev = c
        + (w * v).trace()
        + wbar.dot(&((2.0 * t_mat.transpose() + v) * wbar))
        + 4.0 * mu * m3.dot(&(s.transpose() * wbar))
        - lh.dot(&(&g * &lh));

    Ok(StepOutput {
        v_prev,
        k,
        s_prev,
        t_prev,
        l,
        h,
        c_prev,
    })
}

fn check_synthesis_inputs(
    model: &SystemModel,
    cost: &CostSpec,
    stats: &NoiseStats,
    mu: f64,
) -> Result<()> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::InvalidInput(format!(
            "multiplier must be finite and >= 0, got {mu}"
        )));
    }
    let n = model.state_dim();
    let p = model.input_dim();
    if cost.q.nrows() != n {
        return Err(Error::Dimension(format!(
            "Q must be {n}x{n}, got {}x{}",
            cost.q.nrows(),
            cost.q.ncols()
        )));
    }
    if cost.r.nrows() != p {
        return Err(Error::Dimension(format!(
            "R must be {p}x{p}, got {}x{}",
            cost.r.nrows(),
            cost.r.ncols()
        )));
    }
    if stats.mean.len() != n || stats.cov.nrows() != n || stats.m3.len() != n {
        return Err(Error::Dimension(format!(
            "noise statistics must have dimension {n}"
        )));
    }
    check_stats_weighting(stats, &cost.qc)
}

/// Finite-horizon backward pass at multiplier μ. Standing assumptions
/// (stabilizability, detectability, R ≻ 0) are the caller's responsibility
/// via [`crate::model::validate`]; shape and weighting consistency are
/// checked here.
pub fn backward_pass(
    model: &SystemModel,
    cost: &CostSpec,
    stats: &NoiseStats,
    mu: f64,
) -> Result<AffinePolicy> {
    check_synthesis_inputs(model, cost, stats, mu)?;
    let n_stages = model.require_horizon()?;
    let q_mu = inflate(&cost.q, &cost.qc, &stats.cov, mu)?;

    let n = model.state_dim();
    let mut gains = vec![DMatrix::zeros(0, 0); n_stages];
    let mut offsets_l = vec![DVector::zeros(0); n_stages];
    let mut offsets_h = vec![DVector::zeros(0); n_stages];
    let mut values_v = vec![DMatrix::zeros(0, 0); n_stages + 1];
    let mut values_s = vec![DMatrix::zeros(0, 0); n_stages + 1];
    let mut values_t = vec![DMatrix::zeros(0, 0); n_stages + 1];
    let mut constants_c = vec![0.0; n_stages + 1];

    values_v[n_stages] = q_mu.clone();
    values_s[n_stages] = cost.qc.clone();
    values_t[n_stages] = DMatrix::zeros(n, n);
    constants_c[n_stages] = 0.0;

    for t in (1..=n_stages).rev() {
        let step = backward_step(
            model,
            cost,
            stats,
            mu,
            &q_mu,
            &values_v[t],
            &values_s[t],
            &values_t[t],
            constants_c[t],
        )?;
        values_v[t - 1] = step.v_prev;
        values_s[t - 1] = step.s_prev;
        values_t[t - 1] = step.t_prev;
        constants_c[t - 1] = step.c_prev;
        gains[t - 1] = step.k;
        offsets_l[t - 1] = step.l;
        offsets_h[t - 1] = step.h;
    }

    Ok(AffinePolicy {
        gains,
        offsets_l,
        offsets_h,
        values_v,
        values_s,
        values_t,
        constants_c,
        mu,
        steady: false,
    })
}

/// Stationary policy at multiplier μ: value-iterate the V recursion from Q_μ
/// until ‖V_{k+1} - V_k‖_max ≤ tol·(1 + ‖V_k‖_max), then extract the limits
/// K, S = (I - Φ')⁻¹Qc, T = (I - Φ')⁻¹Φ'V, l, h with Φ = A + BK. The closed
/// loop must come out strictly stable.
pub fn steady_state(
    model: &SystemModel,
    cost: &CostSpec,
    stats: &NoiseStats,
    mu: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SteadyStatePolicy> {
    check_synthesis_inputs(model, cost, stats, mu)?;
    if !tol.is_finite() || tol <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "tolerance must be finite and > 0, got {tol}"
        )));
    }
    if max_iter == 0 {
        return Err(Error::InvalidInput("max_iter must be >= 1".into()));
    }
    let q_mu = inflate(&cost.q, &cost.qc, &stats.cov, mu)?;
    let a = &model.a;
    let b = &model.b;

    let mut v = q_mu.clone();
    let mut iterations = 0;
    let mut residual;
    loop {
        let btv = b.transpose() * &v;
        let g = symmetrize(&(&btv * b + &cost.r));
        let chol = Cholesky::new(g).ok_or_else(|| {
            Error::Numerical("B'VB + R is not positive definite; check that R is".into())
        })?;
        let btva = &btv * a;
        let k = -chol.solve(&btva);
        let v_next = symmetrize(&(a.transpose() * &v * a + &q_mu + btva.transpose() * &k));
        residual = (&v_next - &v).amax();
        let converged = residual <= tol * (1.0 + v.amax());
        v = v_next;
        iterations += 1;
        if converged {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::Convergence {
                iterations,
                residual,
            });
        }
    }

    let btv = b.transpose() * &v;
    let g = symmetrize(&(&btv * b + &cost.r));
    let chol = Cholesky::new(g).ok_or_else(|| {
        Error::Numerical("B'VB + R is not positive definite; check that R is".into())
    })?;
    let k = -chol.solve(&(&btv * a));
    let phi = a + b * &k;

    let rho = spectral_radius(&phi)?;
    if rho >= 1.0 {
        return Err(Error::Numerical(format!(
            "closed loop is not stable at convergence (spectral radius {rho:.6})"
        )));
    }

    let n = model.state_dim();
    let i_minus_phi_t = DMatrix::identity(n, n) - phi.transpose();
    let lu = i_minus_phi_t.clone().lu();
    let s = lu
        .solve(&cost.qc)
        .ok_or_else(|| Error::Numerical("(I - Φ') is numerically singular".into()))?;
    let t = lu
        .solve(&(phi.transpose() * &v))
        .ok_or_else(|| Error::Numerical("(I - Φ') is numerically singular".into()))?;
    // ρ(Φ) < 1 implies invertibility; still guard the solve quality.
    let s_resid = (&i_minus_phi_t * &s - &cost.qc).amax();
    if s_resid > 1e-8 * (1.0 + cost.qc.amax()) {
        return Err(Error::Numerical(format!(
            "stationary linear solve residual too large ({s_resid:.3e})"
        )));
    }

    let l = -2.0 * mu * chol.solve(&(b.transpose() * &s * &stats.m3));
    let h = -chol.solve(&(b.transpose() * (&v + &t) * &stats.mean));

    Ok(SteadyStatePolicy {
        v,
        k,
        s,
        t,
        l,
        h,
        iterations,
        residual,
        mu,
    })
}

/// The dual function D(μ) = x0'V_0 x0 + 4μ·M3'S_0'x0 + 2·w̄'T_0'x0 + c_0 + g(μ)
/// with g(μ) = -μ·ε̄ - 4μ·x0'QcWQc x0 - 4μ·M3'Qc x0 (the stage-0 terms the
/// risk sum excludes).
pub fn dual_value(
    model: &SystemModel,
    cost: &CostSpec,
    stats: &NoiseStats,
    mu: f64,
    eps_bar: f64,
) -> Result<f64> {
    let policy = backward_pass(model, cost, stats, mu)?;
    dual_value_from_policy(model, cost, stats, &policy, eps_bar)
}

/// As [`dual_value`], reusing an already-computed backward pass at the same μ.
pub(crate) fn dual_value_from_policy(
    model: &SystemModel,
    cost: &CostSpec,
    stats: &NoiseStats,
    policy: &AffinePolicy,
    eps_bar: f64,
) -> Result<f64> {
    if policy.steady {
        return Err(Error::InvalidInput(
            "dual value needs a finite-horizon backward pass, not a stationary expansion".into(),
        ));
    }
    if !eps_bar.is_finite() {
        return Err(Error::InvalidInput("eps_bar must be finite".into()));
    }
    let mu = policy.mu;
    let x0 = &model.x0;
    let qc = &cost.qc;
    let qc_x0 = qc * x0;
    let g_mu = -mu * eps_bar
        - 4.0 * mu * qc_x0.dot(&(&stats.cov * &qc_x0))
        - 4.0 * mu * stats.m3.dot(&qc_x0);
    Ok(x0.dot(&(&policy.values_v[0] * x0))
        + 4.0 * mu * stats.m3.dot(&(policy.values_s[0].transpose() * x0))
        + 2.0 * stats.mean.dot(&(policy.values_t[0].transpose() * x0))
        + policy.constants_c[0]
        + g_mu)
}
