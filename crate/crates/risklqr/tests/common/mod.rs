//! Plants and noise models shared by the integration suites.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use risklqr::model::{CostSpec, MixtureComponent, NoiseSpec, SystemModel};

/// Two-axis double integrator, sampling time 0.5, one force input per axis;
/// Q = diag(1, 0.1, 2, 0.1), R = I. The benchmark plant for the gain and
/// monotonicity checks.
pub fn benchmark_plant(horizon: Option<usize>) -> (SystemModel, CostSpec) {
    let ts = 0.5;
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, ts, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, ts, //
            0.0, 0.0, 0.0, 1.0,
        ],
    );
    let b = DMatrix::from_row_slice(
        4,
        2,
        &[
            ts * ts / 2.0,
            0.0,
            ts,
            0.0,
            0.0,
            ts * ts / 2.0,
            0.0,
            ts,
        ],
    );
    let model = SystemModel::new(a, b, DVector::zeros(4), horizon).unwrap();
    let q = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 0.1, 2.0, 0.1]));
    let cost = CostSpec::new(q, DMatrix::identity(2, 2), None, 0.0).unwrap();
    (model, cost)
}

/// Centered two-component wind gust entering through the input map; the
/// heavy component makes the first axis the risky direction. Second Gaussian
/// parameters are variances.
pub fn wind_noise() -> NoiseSpec {
    let (model, _) = benchmark_plant(None);
    NoiseSpec::LinearMap {
        g: model.b.clone(),
        inner: Box::new(NoiseSpec::GaussianMixture {
            weights: vec![0.8, 0.2],
            components: vec![
                MixtureComponent {
                    mean: DVector::from_row_slice(&[-10.0, 0.0]),
                    cov: DMatrix::from_diagonal(&DVector::from_row_slice(&[30.0, 5.0])),
                },
                MixtureComponent {
                    mean: DVector::from_row_slice(&[40.0, 0.0]),
                    cov: DMatrix::from_diagonal(&DVector::from_row_slice(&[60.0, 5.0])),
                },
            ],
        }),
    }
}

/// Scalar two-atom noise: 4 with probability 1/4, else 0 — mean 1,
/// variance 3, weighted third moment 6, quartic spread 12 at unit weighting.
pub fn bernoulli_beta4() -> NoiseSpec {
    NoiseSpec::FiniteDiscrete {
        atoms: vec![
            DVector::from_row_slice(&[4.0]),
            DVector::from_row_slice(&[0.0]),
        ],
        probs: vec![0.25, 0.75],
    }
}

/// Scalar plant A = B = Q = 1 with a vanishing input penalty.
pub fn scalar_plant(horizon: Option<usize>) -> (SystemModel, CostSpec) {
    let model = SystemModel::new(
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        horizon,
    )
    .unwrap();
    let cost = CostSpec::new(
        DMatrix::identity(1, 1),
        DMatrix::from_element(1, 1, 1e-8),
        None,
        0.0,
    )
    .unwrap();
    (model, cost)
}
