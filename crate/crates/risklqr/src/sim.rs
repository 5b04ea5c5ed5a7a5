//! Monte Carlo validation: closed-loop rollouts, cost/risk estimators with
//! standard errors, and empirical CDFs.
//!
//! Rollout r draws its noise on RNG lane r + 1 (lane 0 belongs to
//! [`crate::moments::sample`]), with the stage index t as the counter, so
//! estimates are bit-reproducible for a given seed regardless of thread
//! count or rollout partitioning.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CostSpec, NoiseSpec, SystemModel};
use crate::moments::{noise_stats, CompiledSampler};
use crate::riccati::AffinePolicy;

/// One simulated closed-loop trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// x_0 .. x_N.
    pub states: Vec<DVector<f64>>,
    /// u_0 .. u_{N-1}.
    pub inputs: Vec<DVector<f64>>,
    /// x_t'Q x_t + u_t'R u_t for t < N; the terminal entry is x_N'Q x_N.
    pub stage_penalties: Vec<f64>,
    /// One-step predictive errors Δ_t = x_t'Qc x_t - E[x_t'Qc x_t | F_{t-1}]
    /// for t = 1..N; the conditional expectation is computed in closed form
    /// as x̂_t'Qc x̂_t + Tr(WQc) with x̂_t = A x_{t-1} + B u_{t-1} + w̄.
    pub pred_errors: Vec<f64>,
}

/// Sample means and standard errors from a batch of rollouts.
///
/// `jr_raw_hat` estimates the unshifted constraint statistic
/// E Σ_{t=1}^N Δ_t², which relates to the risk functional by
/// E Σ Δ_t² = J_R + N·m4 - 4N·Tr((WQc)²); the shift is deterministic, so
/// comparisons against analytic J_R values apply it to one side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateReport {
    pub j_hat: f64,
    pub j_se: f64,
    pub jr_raw_hat: f64,
    pub jr_raw_se: f64,
    pub n_rollouts: usize,
    pub seed: u64,
}

/// Precomputed simulation inputs shared across rollouts.
struct SimContext {
    sampler: CompiledSampler,
    wbar: DVector<f64>,
    tr_wqc: f64,
}

impl SimContext {
    fn new(
        policy: &AffinePolicy,
        model: &SystemModel,
        spec: &NoiseSpec,
        cost: &CostSpec,
    ) -> Result<Self> {
        policy.check_against(model)?;
        if cost.q.nrows() != model.state_dim() || cost.r.nrows() != model.input_dim() {
            return Err(Error::Dimension(
                "cost matrices do not match the model dimensions".into(),
            ));
        }
        let stats = noise_stats(spec, &cost.qc)?;
        if stats.mean.len() != model.state_dim() {
            return Err(Error::Dimension(format!(
                "noise dimension {} does not match the state dimension {}",
                stats.mean.len(),
                model.state_dim()
            )));
        }
        Ok(Self {
            sampler: CompiledSampler::compile(spec)?,
            tr_wqc: (&stats.cov * &cost.qc).trace(),
            wbar: stats.mean,
        })
    }
}

/// Simulate one closed-loop trajectory under `policy`, drawing noise from
/// the lane assigned to `rollout_index`.
pub fn rollout(
    policy: &AffinePolicy,
    model: &SystemModel,
    spec: &NoiseSpec,
    cost: &CostSpec,
    seed: u64,
    rollout_index: u64,
) -> Result<Trajectory> {
    let ctx = SimContext::new(policy, model, spec, cost)?;
    Ok(run_rollout(&ctx, policy, model, cost, seed, rollout_index))
}

fn run_rollout(
    ctx: &SimContext,
    policy: &AffinePolicy,
    model: &SystemModel,
    cost: &CostSpec,
    seed: u64,
    rollout_index: u64,
) -> Trajectory {
    let n_stages = policy.horizon();
    let lane = rollout_index
        .checked_add(1)
        .expect("rollout index leaves no room for the reserved lane");
    let mut states = Vec::with_capacity(n_stages + 1);
    let mut inputs = Vec::with_capacity(n_stages);
    let mut stage_penalties = Vec::with_capacity(n_stages + 1);
    let mut pred_errors = Vec::with_capacity(n_stages);
    states.push(model.x0.clone());
    for t in 0..n_stages {
        let x = &states[t];
        let u = policy.control(t, x);
        stage_penalties.push(x.dot(&(&cost.q * x)) + u.dot(&(&cost.r * &u)));
        let predicted = &model.a * x + &model.b * &u;
        let x_next = &predicted + ctx.sampler.draw(seed, lane, t as u64);
        let x_hat = predicted + &ctx.wbar;
        pred_errors.push(
            x_next.dot(&(&cost.qc * &x_next)) - x_hat.dot(&(&cost.qc * &x_hat)) - ctx.tr_wqc,
        );
        inputs.push(u);
        states.push(x_next);
    }
    let x_n = &states[n_stages];
    stage_penalties.push(x_n.dot(&(&cost.q * x_n)));
    Trajectory {
        states,
        inputs,
        stage_penalties,
        pred_errors,
    }
}

/// Run `n_rollouts` independent rollouts (in parallel) and report the sample
/// means and standard errors of the total cost and of Σ_t Δ_t².
///
/// At least 100 rollouts are required for the standard errors to mean much.
pub fn estimate(
    policy: &AffinePolicy,
    model: &SystemModel,
    spec: &NoiseSpec,
    cost: &CostSpec,
    seed: u64,
    n_rollouts: usize,
) -> Result<EstimateReport> {
    if n_rollouts < 100 {
        return Err(Error::InvalidInput(format!(
            "need at least 100 rollouts for a meaningful standard error, got {n_rollouts}"
        )));
    }
    let ctx = SimContext::new(policy, model, spec, cost)?;
    let per_rollout: Vec<(f64, f64)> = (0..n_rollouts)
        .into_par_iter()
        .map(|r| {
            let traj = run_rollout(&ctx, policy, model, cost, seed, r as u64);
            let total_cost: f64 = traj.stage_penalties.iter().sum();
            let sum_sq: f64 = traj.pred_errors.iter().map(|d| d * d).sum();
            (total_cost, sum_sq)
        })
        .collect();
    // The reduction runs sequentially in index order so the result does not
    // depend on the parallel partitioning.
    let (j_hat, j_se) = mean_and_se(per_rollout.iter().map(|p| p.0));
    let (jr_raw_hat, jr_raw_se) = mean_and_se(per_rollout.iter().map(|p| p.1));
    Ok(EstimateReport {
        j_hat,
        j_se,
        jr_raw_hat,
        jr_raw_se,
        n_rollouts,
        seed,
    })
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt() / n.sqrt())
}

/// Empirical CDF of a sample: strictly increasing values paired with the
/// fraction of the sample at or below each, ties merged. The last fraction
/// is exactly 1.
pub fn empirical_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("empirical CDF of an empty sample".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("sample contains NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let mut cdf: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let fraction = (i + 1) as f64 / m;
        match cdf.last_mut() {
            Some(last) if last.0 == *v => last.1 = fraction,
            _ => cdf.push((*v, fraction)),
        }
    }
    Ok(cdf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn fixed_scalar_policy(n_stages: usize, k: f64, l: f64) -> AffinePolicy {
        AffinePolicy {
            gains: vec![DMatrix::from_element(1, 1, k); n_stages],
            offsets_l: vec![DVector::from_element(1, l); n_stages],
            offsets_h: vec![DVector::zeros(1); n_stages],
            values_v: vec![DMatrix::zeros(1, 1); n_stages + 1],
            values_s: vec![DMatrix::zeros(1, 1); n_stages + 1],
            values_t: vec![DMatrix::zeros(1, 1); n_stages + 1],
            constants_c: vec![0.0; n_stages + 1],
            mu: 0.0,
            steady: true,
        }
    }

    #[test]
    fn degenerate_noise_follows_the_deterministic_recursion() {
        let model = SystemModel::new(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DVector::from_element(1, 2.0),
            Some(5),
        )
        .unwrap();
        let cost = CostSpec::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            None,
            1.0,
        )
        .unwrap();
        let spec = NoiseSpec::Degenerate {
            value: DVector::from_element(1, 0.7),
        };
        let policy = fixed_scalar_policy(5, 0.0, 0.0);
        let traj = rollout(&policy, &model, &spec, &cost, 9, 0).unwrap();
        assert_eq!(traj.states[0][0], 2.0);
        for t in 1..=5 {
            assert_eq!(traj.states[t][0], 0.7);
        }
        assert!(traj.pred_errors.iter().all(|d| *d == 0.0));
        assert_eq!(traj.stage_penalties[0], 4.0);
        assert_relative_eq!(traj.stage_penalties[5], 0.49, epsilon = 1e-15);
    }

    #[test]
    fn deadbeat_law_pins_states_to_the_shifted_atoms() {
        // u_t = -x_t - 1 makes x_{t+1} = w_t - 1, which lives on {-1, 3}
        // under the two-atom noise; Δ_t then takes values {-2, 6}.
        let (mut model, cost) = fixtures::scalar_plant(Some(60));
        model.horizon = Some(60);
        let policy = fixed_scalar_policy(60, -1.0, -1.0);
        let spec = fixtures::bernoulli_beta4();
        let traj = rollout(&policy, &model, &spec, &cost, 42, 3).unwrap();
        let mut seen = [false, false];
        for x in &traj.states[1..] {
            assert!(x[0] == -1.0 || x[0] == 3.0, "state {} off-lattice", x[0]);
            seen[usize::from(x[0] == 3.0)] = true;
        }
        assert!(seen[0] && seen[1], "sixty draws should hit both atoms");
        for d in &traj.pred_errors {
            assert!((*d - 6.0).abs() < 1e-12 || (*d + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rollouts_are_bitwise_reproducible() {
        let (model, cost) = fixtures::double_integrator(Some(40));
        let spec = fixtures::wind_noise();
        let stats = noise_stats(&spec, &cost.qc).unwrap();
        let policy = crate::riccati::backward_pass(&model, &cost, &stats, 0.5).unwrap();
        let a = rollout(&policy, &model, &spec, &cost, 2024, 7).unwrap();
        let b = rollout(&policy, &model, &spec, &cost, 2024, 7).unwrap();
        assert_eq!(a, b);
        let c = rollout(&policy, &model, &spec, &cost, 2024, 8).unwrap();
        assert_ne!(a.states[1], c.states[1], "lanes must decorrelate rollouts");
    }

    #[test]
    fn estimates_are_bitwise_reproducible_across_runs() {
        let (mut model, cost) = fixtures::double_integrator(Some(25));
        model.horizon = Some(25);
        let spec = fixtures::wind_noise();
        let stats = noise_stats(&spec, &cost.qc).unwrap();
        let policy = crate::riccati::backward_pass(&model, &cost, &stats, 1.0).unwrap();
        let a = estimate(&policy, &model, &spec, &cost, 11, 400).unwrap();
        let b = estimate(&policy, &model, &spec, &cost, 11, 400).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_spread_noise_gives_zero_standard_errors() {
        let (mut model, cost) = fixtures::scalar_plant(Some(10));
        model.x0 = DVector::from_element(1, 1.0);
        let spec = NoiseSpec::Degenerate {
            value: DVector::from_element(1, 0.25),
        };
        let policy = fixed_scalar_policy(10, -0.5, 0.0);
        let report = estimate(&policy, &model, &spec, &cost, 5, 128).unwrap();
        assert_eq!(report.jr_raw_hat, 0.0);
        assert_eq!(report.jr_raw_se, 0.0);
        // The rollouts are identical, but the sequential sum in the mean can
        // round, so the SE is only zero up to that rounding.
        assert!(report.j_se <= 1e-12 * report.j_hat.abs());
        assert!(report.j_hat > 0.0);
        assert_eq!(report.n_rollouts, 128);
    }

    #[test]
    fn too_few_rollouts_are_rejected() {
        let (model, cost) = fixtures::scalar_plant(Some(10));
        let policy = fixed_scalar_policy(10, -0.5, 0.0);
        let err = estimate(
            &policy,
            &model,
            &fixtures::bernoulli_beta4(),
            &cost,
            5,
            99,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn cdf_handles_singletons_and_ties() {
        assert_eq!(empirical_cdf(&[5.0]).unwrap(), vec![(5.0, 1.0)]);
        assert_eq!(
            empirical_cdf(&[1.0, 2.0, 2.0, 4.0]).unwrap(),
            vec![(1.0, 0.25), (2.0, 0.75), (4.0, 1.0)]
        );
        assert_eq!(
            empirical_cdf(&[3.0, -1.0, 3.0, 3.0]).unwrap(),
            vec![(-1.0, 0.25), (3.0, 1.0)]
        );
        assert!(empirical_cdf(&[]).is_err());
        assert!(empirical_cdf(&[1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn cdf_is_a_valid_distribution_function(
            values in proptest::collection::vec(-1e6..1e6f64, 1..200)
        ) {
            let cdf = empirical_cdf(&values).unwrap();
            prop_assert_eq!(cdf.last().unwrap().1, 1.0);
            for pair in cdf.windows(2) {
                prop_assert!(pair[0].0 < pair[1].0);
                prop_assert!(pair[0].1 < pair[1].1);
            }
            let m = values.len() as f64;
            for (v, f) in &cdf {
                let count = values.iter().filter(|x| *x <= v).count();
                prop_assert_eq!(*f, count as f64 / m);
            }
        }
    }
}
