//! Cross-validation of the analytic machinery against Monte Carlo sampling
//! and against independent formulations. Every test here uses a fixed seed,
//! so the outcomes are deterministic; the tolerances are sized at several
//! standard errors of the corresponding estimator.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use risklqr::{
    backward_pass, dual_value, empirical_stats, estimate, lagrangian_eval, lqr_cost,
    noise_stats, risk_value, rollout, sample,
};

#[test]
fn sampled_mixture_moments_match_the_analytic_values() {
    let (_, cost) = common::benchmark_plant(None);
    let spec = common::wind_noise();
    let analytic = noise_stats(&spec, &cost.qc).unwrap();
    let draws = sample(&spec, 31, 200_000).unwrap();
    let empirical = empirical_stats(&draws, &cost.qc).unwrap();

    for i in 0..4 {
        assert!(
            (empirical.mean[i] - analytic.mean[i]).abs() < 0.2,
            "mean[{i}]: {} vs {}",
            empirical.mean[i],
            analytic.mean[i]
        );
        for j in 0..4 {
            let (e, a) = (empirical.cov[(i, j)], analytic.cov[(i, j)]);
            assert!(
                (e - a).abs() < 0.05 * a.abs() + 0.5,
                "cov[({i},{j})]: {e} vs {a}"
            );
        }
        let (e, a) = (empirical.m3[i], analytic.m3[i]);
        assert!(
            (e - a).abs() < 0.1 * a.abs() + 3.0,
            "m3[{i}]: {e} vs {a}"
        );
    }
    assert!(
        (empirical.m4 - analytic.m4).abs() < 0.1 * analytic.m4,
        "m4: {} vs {}",
        empirical.m4,
        analytic.m4
    );
}

#[test]
fn estimate_agrees_with_the_analytic_cost_and_risk() {
    let n_stages = 25;
    let (model, cost) = common::benchmark_plant(Some(n_stages));
    let spec = common::wind_noise();
    let stats = noise_stats(&spec, &cost.qc).unwrap();
    let policy = backward_pass(&model, &cost, &stats, 0.5).unwrap();

    let report = estimate(&policy, &model, &spec, &cost, 17, 20_000).unwrap();
    let j = lqr_cost(&policy, &model, &stats, &cost).unwrap();
    assert!(report.j_se > 0.0);
    assert!(
        (report.j_hat - j).abs() <= 4.0 * report.j_se,
        "cost: {} vs {} (se {})",
        report.j_hat,
        j,
        report.j_se
    );

    // E Σ_t Δ_t² differs from J_R by the deterministic shift
    // N·m4 - 4N·Tr((WQc)²).
    let jr = risk_value(&policy, &model, &stats, &cost.qc).unwrap().jr;
    let wqc = &stats.cov * &cost.qc;
    let n = n_stages as f64;
    let raw = jr + n * stats.m4 - 4.0 * n * (&wqc * &wqc).trace();
    assert!(
        (report.jr_raw_hat - raw).abs() <= 4.0 * report.jr_raw_se,
        "risk: {} vs {} (se {})",
        report.jr_raw_hat,
        raw,
        report.jr_raw_se
    );
}

#[test]
fn prediction_errors_are_centered() {
    let (model, cost) = common::scalar_plant(Some(10));
    let spec = common::bernoulli_beta4();
    let stats = noise_stats(&spec, &cost.qc).unwrap();
    let policy = backward_pass(&model, &cost, &stats, 0.3).unwrap();

    let mut deltas = Vec::with_capacity(10 * 20_000);
    for r in 0..20_000 {
        let traj = rollout(&policy, &model, &spec, &cost, 23, r).unwrap();
        deltas.extend_from_slice(&traj.pred_errors);
    }
    let m = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / m;
    let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (m - 1.0);
    let se = (var / m).sqrt();
    assert!(
        mean.abs() <= 5.0 * se,
        "prediction errors are biased: mean {mean}, se {se}"
    );
}

#[test]
fn weak_duality_holds_on_a_candidate_grid() {
    let (model, cost) = common::scalar_plant(Some(10));
    let stats = noise_stats(&common::bernoulli_beta4(), &cost.qc).unwrap();
    let eps_bar = 10.0;
    let grid = [0.0, 0.3, 1.0, 3.0, 10.0];
    let candidates: Vec<_> = grid
        .iter()
        .map(|nu| backward_pass(&model, &cost, &stats, *nu).unwrap())
        .collect();
    for mu in grid {
        let dual = dual_value(&model, &cost, &stats, mu, eps_bar).unwrap();
        for (nu, candidate) in grid.iter().zip(&candidates) {
            let lag = lagrangian_eval(candidate, &model, &stats, &cost, mu, eps_bar).unwrap();
            assert!(
                lag >= dual - 1e-9 * (1.0 + dual.abs()),
                "duality gap inverted: L(u*({nu}), {mu}) = {lag} < D({mu}) = {dual}"
            );
        }
    }
}

#[test]
fn backward_pass_policies_minimize_the_lagrangian() {
    let (model, cost) = common::benchmark_plant(Some(30));
    let stats = noise_stats(&common::wind_noise(), &cost.qc).unwrap();
    let mu = 1.0;
    let eps_bar = 0.0;
    let base = backward_pass(&model, &cost, &stats, mu).unwrap();
    let lag_base = lagrangian_eval(&base, &model, &stats, &cost, mu, eps_bar).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let mut perturbed = base.clone();
        for t in 0..perturbed.horizon() {
            for entry in perturbed.gains[t].iter_mut() {
                *entry += 1e-3 * (rng.random::<f64>() - 0.5);
            }
            for entry in perturbed.offsets_l[t].iter_mut() {
                *entry += 1e-3 * (rng.random::<f64>() - 0.5);
            }
        }
        let lag = lagrangian_eval(&perturbed, &model, &stats, &cost, mu, eps_bar).unwrap();
        assert!(
            lag >= lag_base - 1e-9 * (1.0 + lag_base.abs()),
            "trial {trial}: perturbed Lagrangian {lag} beats the optimum {lag_base}"
        );
    }
}

#[test]
fn degenerate_noise_estimates_are_exactly_deterministic() {
    // With zero-spread noise the estimator must reproduce the analytic cost
    // to rounding, not just statistically.
    let (mut model, cost) = common::scalar_plant(Some(12));
    model.x0 = DVector::from_element(1, 2.0);
    let spec = risklqr::NoiseSpec::Degenerate {
        value: DVector::from_element(1, -0.3),
    };
    let stats = noise_stats(&spec, &cost.qc).unwrap();
    let policy = backward_pass(&model, &cost, &stats, 0.0).unwrap();
    let report = estimate(&policy, &model, &spec, &cost, 99, 100).unwrap();
    let j = lqr_cost(&policy, &model, &stats, &cost).unwrap();
    assert!((report.j_hat - j).abs() <= 1e-10 * (1.0 + j.abs()));
    assert_eq!(report.jr_raw_hat, 0.0);
}

#[test]
fn empirical_noise_round_trips_through_the_sampler() {
    // Feeding sampled draws back in as an Empirical spec must reproduce the
    // plug-in statistics of those draws exactly.
    let qc = DMatrix::identity(2, 2);
    let spec = risklqr::NoiseSpec::Gaussian {
        mean: DVector::from_row_slice(&[1.0, -2.0]),
        cov: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
    };
    let draws = sample(&spec, 7, 5_000).unwrap();
    let direct = empirical_stats(&draws, &qc).unwrap();
    let via_spec = noise_stats(
        &risklqr::NoiseSpec::Empirical {
            samples: draws.clone(),
        },
        &qc,
    )
    .unwrap();
    assert_eq!(direct.mean, via_spec.mean);
    assert_eq!(direct.cov, via_spec.cov);
    assert_eq!(direct.m3, via_spec.m3);
    assert_eq!(direct.m4, via_spec.m4);

    // And the plug-in moments of a large Gaussian sample sit near the truth.
    let analytic = noise_stats(&spec, &qc).unwrap();
    assert!((direct.mean - &analytic.mean).amax() < 0.1);
    assert!((direct.cov - &analytic.cov).amax() < 0.15);
}
