//! The noise statistics (w̄, W, M3, m4) driving the risk-aware recursions,
//! computed analytically for every supported `NoiseSpec`, plus the
//! deterministic sampler used by the simulation oracle.
//!
//! Sampling is counter-based so results never depend on batching or thread
//! scheduling: each draw owns a fresh ChaCha8 generator keyed by the 64-bit
//! user seed and a lane id (lane 0 = `sample`, lane r+1 = rollout r), with the
//! ChaCha stream index set to the draw index. Identical (seed, lane, index)
//! triples produce bit-identical vectors on every platform.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{symmetric_sqrt, symmetrize, MixtureComponent, NoiseSpec};

/// Sufficient statistics of the noise under a constraint weighting Qc:
/// mean w̄, covariance W, the weighted third central moment
/// M3 = E[(w-w̄)(w-w̄)'Qc(w-w̄)], and the quartic spread
/// m4 = E[((w-w̄)'Qc(w-w̄) - Tr(WQc))²].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub m3: DVector<f64>,
    pub m4: f64,
    /// The weighting these statistics were computed under; consumers check it
    /// against their own Qc to catch mismatched pipelines.
    pub qc_used: DMatrix<f64>,
}

/// Exact statistics of `spec` under the weighting `qc`.
pub fn noise_stats(spec: &NoiseSpec, qc: &DMatrix<f64>) -> Result<NoiseStats> {
    spec.validate()?;
    let resolved = resolve(spec)?;
    let n = resolved.dim();
    check_qc(qc, n)?;
    let (mean, cov, m3, m4_raw) = match &resolved {
        NoiseSpec::Degenerate { value } => (
            value.clone(),
            DMatrix::zeros(n, n),
            DVector::zeros(n),
            0.0,
        ),
        NoiseSpec::Gaussian { mean, cov } => {
            let cov = symmetrize(cov);
            let m4 = 2.0 * trace_prod_sq(qc, &cov);
            (mean.clone(), cov, DVector::zeros(n), m4)
        }
        NoiseSpec::GaussianMixture {
            weights,
            components,
        } => mixture_stats(weights, components, qc),
        NoiseSpec::FiniteDiscrete { atoms, probs } => {
            discrete_stats(atoms.iter(), probs.iter().cloned(), qc)
        }
        NoiseSpec::Empirical { samples } => {
            let m = samples.nrows();
            let prob = 1.0 / m as f64;
            let rows: Vec<DVector<f64>> =
                samples.row_iter().map(|r| r.transpose()).collect();
            discrete_stats(rows.iter(), std::iter::repeat_n(prob, m), qc)
        }
        NoiseSpec::LinearMap { .. } => unreachable!("resolve eliminates linear maps"),
    };
    finalize_stats(mean, cov, m3, m4_raw, qc)
}

/// Plug-in statistics of raw samples (rows of an m x n matrix), with the
/// sample mean substituted for w̄ and 1/m normalization throughout. Used as
/// the Monte Carlo oracle for `noise_stats`.
pub fn empirical_stats(samples: &DMatrix<f64>, qc: &DMatrix<f64>) -> Result<NoiseStats> {
    let m = samples.nrows();
    if m < 2 {
        return Err(Error::InvalidInput(format!(
            "empirical statistics need >= 2 samples, got {m}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("samples have non-finite entries".into()));
    }
    let n = samples.ncols();
    check_qc(qc, n)?;

    let inv_m = 1.0 / m as f64;
    let mut mean = DVector::zeros(n);
    for row in samples.row_iter() {
        mean += inv_m * row.transpose();
    }
    let mut cov = DMatrix::zeros(n, n);
    let mut m3 = DVector::zeros(n);
    let mut qforms = Vec::with_capacity(m);
    for row in samples.row_iter() {
        let delta = row.transpose() - &mean;
        cov += inv_m * &delta * delta.transpose();
        let qf = delta.dot(&(qc * &delta));
        m3 += (inv_m * qf) * delta;
        qforms.push(qf);
    }
    let tr_wqc = (&cov * qc).trace();
    let m4 = qforms
        .iter()
        .map(|qf| inv_m * (qf - tr_wqc) * (qf - tr_wqc))
        .sum();
    finalize_stats(mean, cov, m3, m4, qc)
}

/// `count` i.i.d. draws as the rows of a count x n matrix. Row i depends only
/// on (spec, seed, i), never on `count` or evaluation order.
pub fn sample(spec: &NoiseSpec, seed: u64, count: usize) -> Result<DMatrix<f64>> {
    if count == 0 {
        return Err(Error::InvalidInput("sample count must be >= 1".into()));
    }
    let sampler = CompiledSampler::compile(spec)?;
    let n = sampler.dim();
    let mut out = DMatrix::zeros(count, n);
    for i in 0..count {
        let w = sampler.draw(seed, 0, i as u64);
        out.row_mut(i).copy_from(&w.transpose());
    }
    Ok(out)
}

/// Eliminate `LinearMap` layers: push w = G d through the inner spec so the
/// result is a concrete distribution of the same law. The pushforward is
/// exact for every variant (Gaussians map to Gaussians, atoms and empirical
/// rows map pointwise), so no sampling fallback is ever needed.
fn resolve(spec: &NoiseSpec) -> Result<NoiseSpec> {
    match spec {
        NoiseSpec::LinearMap { g, inner } => {
            let inner = resolve(inner)?;
            Ok(match inner {
                NoiseSpec::Degenerate { value } => NoiseSpec::Degenerate { value: g * value },
                NoiseSpec::Gaussian { mean, cov } => NoiseSpec::Gaussian {
                    mean: g * mean,
                    cov: symmetrize(&(g * cov * g.transpose())),
                },
                NoiseSpec::GaussianMixture {
                    weights,
                    components,
                } => NoiseSpec::GaussianMixture {
                    weights,
                    components: components
                        .into_iter()
                        .map(|c| MixtureComponent {
                            mean: g * c.mean,
                            cov: symmetrize(&(g * c.cov * g.transpose())),
                        })
                        .collect(),
                },
                NoiseSpec::FiniteDiscrete { atoms, probs } => NoiseSpec::FiniteDiscrete {
                    atoms: atoms.into_iter().map(|a| g * a).collect(),
                    probs,
                },
                NoiseSpec::Empirical { samples } => NoiseSpec::Empirical {
                    samples: samples * g.transpose(),
                },
                NoiseSpec::LinearMap { .. } => unreachable!("inner already resolved"),
            })
        }
        other => Ok(other.clone()),
    }
}

fn mixture_stats(
    weights: &[f64],
    components: &[MixtureComponent],
    qc: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, f64) {
    let n = components[0].mean.len();
    let mut mean = DVector::zeros(n);
    for (w, c) in weights.iter().zip(components) {
        mean += *w * &c.mean;
    }
    let mut cov = DMatrix::zeros(n, n);
    let mut m3 = DVector::zeros(n);
    let mut m4_sum = 0.0;
    for (w, c) in weights.iter().zip(components) {
        let delta = &c.mean - &mean;
        let sigma = symmetrize(&c.cov);
        cov += *w * (&sigma + &delta * delta.transpose());

        let qc_delta = qc * &delta;
        let c_i = delta.dot(&qc_delta);
        let tau_i = (qc * &sigma).trace();
        m3 += *w * ((c_i + tau_i) * &delta + 2.0 * (&sigma * &qc_delta));
        m4_sum += *w
            * (2.0 * trace_prod_sq(qc, &sigma)
                + 4.0 * qc_delta.dot(&(&sigma * &qc_delta))
                + (tau_i + c_i) * (tau_i + c_i));
    }
    let tr_wqc = (&cov * qc).trace();
    (mean, cov, m3, m4_sum - tr_wqc * tr_wqc)
}

fn discrete_stats<'a, I, P>(
    atoms: I,
    probs: P,
    qc: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, f64)
where
    I: Iterator<Item = &'a DVector<f64>> + Clone,
    P: Iterator<Item = f64> + Clone,
{
    let n = atoms.clone().next().map_or(0, |a| a.len());
    let mut mean = DVector::zeros(n);
    for (a, p) in atoms.clone().zip(probs.clone()) {
        mean += p * a;
    }
    let mut cov = DMatrix::zeros(n, n);
    let mut m3 = DVector::zeros(n);
    let mut qforms = Vec::new();
    for (a, p) in atoms.zip(probs.clone()) {
        let delta = a - &mean;
        cov += p * &delta * delta.transpose();
        let qf = delta.dot(&(qc * &delta));
        m3 += (p * qf) * &delta;
        qforms.push((p, qf));
    }
    let tr_wqc = (&cov * qc).trace();
    let m4 = qforms
        .into_iter()
        .map(|(p, qf)| p * (qf - tr_wqc) * (qf - tr_wqc))
        .sum();
    (mean, cov, m3, m4)
}

fn finalize_stats(
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    m3: DVector<f64>,
    m4: f64,
    qc: &DMatrix<f64>,
) -> Result<NoiseStats> {
    let cov = symmetrize(&cov);
    let m4 = if m4 < 0.0 {
        // The mixture formula subtracts Tr(WQc)²; tolerate that much rounding.
        let tr = (&cov * qc).trace();
        let tol = 1e-12 * (1.0 + tr * tr);
        if m4 < -tol {
            return Err(Error::Numerical(format!(
                "fourth-moment spread came out negative ({m4:.3e})"
            )));
        }
        0.0
    } else {
        m4
    };
    Ok(NoiseStats {
        mean,
        cov,
        m3,
        m4,
        qc_used: qc.clone(),
    })
}

fn check_qc(qc: &DMatrix<f64>, n: usize) -> Result<()> {
    if qc.nrows() != n || qc.ncols() != n {
        return Err(Error::Dimension(format!(
            "Qc must be {n}x{n}, got {}x{}",
            qc.nrows(),
            qc.ncols()
        )));
    }
    if qc.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("Qc has non-finite entries".into()));
    }
    Ok(())
}

/// Tr((A·B)²) for symmetric-intent products.
fn trace_prod_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let p = a * b;
    (&p * &p).trace()
}

/// Cross-check that statistics were produced under (numerically) the same
/// weighting the caller is about to use with them.
pub(crate) fn check_stats_weighting(stats: &NoiseStats, qc: &DMatrix<f64>) -> Result<()> {
    if stats.qc_used.shape() != qc.shape() {
        return Err(Error::Dimension(format!(
            "noise statistics were computed under a {}x{} weighting, expected {}x{}",
            stats.qc_used.nrows(),
            stats.qc_used.ncols(),
            qc.nrows(),
            qc.ncols()
        )));
    }
    let gap = (&stats.qc_used - qc).amax();
    if gap > 1e-12 * (1.0 + qc.amax()) {
        return Err(Error::InvalidInput(format!(
            "noise statistics were computed under a different constraint weighting \
             (max deviation {gap:.3e})"
        )));
    }
    Ok(())
}

/// A noise spec lowered to a form ready for repeated deterministic draws:
/// covariance factors precomputed, mixture/discrete weights accumulated,
/// linear maps already pushed through.
#[derive(Debug, Clone)]
pub(crate) enum CompiledSampler {
    Degenerate {
        value: DVector<f64>,
    },
    Gaussian {
        mean: DVector<f64>,
        factor: DMatrix<f64>,
    },
    Mixture {
        cum: Vec<f64>,
        comps: Vec<(DVector<f64>, DMatrix<f64>)>,
    },
    Discrete {
        cum: Vec<f64>,
        atoms: Vec<DVector<f64>>,
    },
    Empirical {
        samples: DMatrix<f64>,
    },
}

impl CompiledSampler {
    pub(crate) fn compile(spec: &NoiseSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match resolve(spec)? {
            NoiseSpec::Degenerate { value } => CompiledSampler::Degenerate { value },
            NoiseSpec::Gaussian { mean, cov } => CompiledSampler::Gaussian {
                factor: symmetric_sqrt(&cov)?,
                mean,
            },
            NoiseSpec::GaussianMixture {
                weights,
                components,
            } => {
                let cum = cumulative(&weights);
                let comps = components
                    .into_iter()
                    .map(|c| Ok((c.mean, symmetric_sqrt(&c.cov)?)))
                    .collect::<Result<Vec<_>>>()?;
                CompiledSampler::Mixture { cum, comps }
            }
            NoiseSpec::FiniteDiscrete { atoms, probs } => CompiledSampler::Discrete {
                cum: cumulative(&probs),
                atoms,
            },
            NoiseSpec::Empirical { samples } => CompiledSampler::Empirical { samples },
            NoiseSpec::LinearMap { .. } => unreachable!("resolve eliminates linear maps"),
        })
    }

    pub(crate) fn dim(&self) -> usize {
        match self {
            CompiledSampler::Degenerate { value } => value.len(),
            CompiledSampler::Gaussian { mean, .. } => mean.len(),
            CompiledSampler::Mixture { comps, .. } => comps[0].0.len(),
            CompiledSampler::Discrete { atoms, .. } => atoms[0].len(),
            CompiledSampler::Empirical { samples } => samples.ncols(),
        }
    }

    /// One draw, fully determined by (seed, lane, index).
    pub(crate) fn draw(&self, seed: u64, lane: u64, index: u64) -> DVector<f64> {
        let mut rng = derive_rng(seed, lane, index);
        match self {
            CompiledSampler::Degenerate { value } => value.clone(),
            CompiledSampler::Gaussian { mean, factor } => {
                mean + factor * standard_normal_vector(&mut rng, mean.len())
            }
            CompiledSampler::Mixture { cum, comps } => {
                let k = pick(cum, rng.random::<f64>());
                let (mean, factor) = &comps[k];
                mean + factor * standard_normal_vector(&mut rng, mean.len())
            }
            CompiledSampler::Discrete { cum, atoms } => {
                atoms[pick(cum, rng.random::<f64>())].clone()
            }
            CompiledSampler::Empirical { samples } => {
                let m = samples.nrows();
                let idx = ((rng.random::<f64>() * m as f64) as usize).min(m - 1);
                samples.row(idx).transpose()
            }
        }
    }
}

fn derive_rng(seed: u64, lane: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&lane.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

fn standard_normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in probs {
        acc += p;
        cum.push(acc);
    }
    cum
}

/// Index of the first cumulative weight exceeding u, clamped to the last bin.
fn pick(cum: &[f64], u: f64) -> usize {
    cum.iter()
        .position(|c| u < *c)
        .unwrap_or(cum.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use crate::fixtures::bernoulli_beta4;

    fn qc1() -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }

    #[test]
    fn two_atom_statistics_match_enumeration() {
        let stats = noise_stats(&bernoulli_beta4(), &qc1()).unwrap();
        assert_relative_eq!(stats.mean[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(stats.cov[(0, 0)], 3.0, epsilon = 1e-12);
        assert_relative_eq!(stats.m3[0], 6.0, epsilon = 1e-12);
        assert_relative_eq!(stats.m4, 12.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_quartic_identity() {
        let spec = NoiseSpec::Gaussian {
            mean: DVector::from_row_slice(&[5.0]),
            cov: DMatrix::from_element(1, 1, 2.0),
        };
        let qc = DMatrix::from_element(1, 1, 3.0);
        let stats = noise_stats(&spec, &qc).unwrap();
        assert_eq!(stats.m3[0], 0.0);
        assert_relative_eq!(stats.m4, 72.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_m3_vanishes_in_higher_dimensions() {
        let spec = NoiseSpec::Gaussian {
            mean: DVector::from_row_slice(&[1.0, -2.0]),
            cov: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        };
        let qc = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 3.0]);
        let stats = noise_stats(&spec, &qc).unwrap();
        assert_eq!(stats.m3.amax(), 0.0);
        let p = &qc * &stats.cov;
        assert_relative_eq!(stats.m4, 2.0 * (&p * &p).trace(), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_statistics_are_all_zero_spread() {
        let spec = NoiseSpec::Degenerate {
            value: DVector::from_row_slice(&[1.0, 2.0]),
        };
        let stats = noise_stats(&spec, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(stats.mean, DVector::from_row_slice(&[1.0, 2.0]));
        assert_eq!(stats.cov.amax(), 0.0);
        assert_eq!(stats.m3.amax(), 0.0);
        assert_eq!(stats.m4, 0.0);
    }

    #[test]
    fn linear_map_of_gaussian_matches_pushed_gaussian() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 1.5]);
        let mean = DVector::from_row_slice(&[0.3, -1.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0]);
        let qc = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 2.0]);
        let mapped = NoiseSpec::LinearMap {
            g: g.clone(),
            inner: Box::new(NoiseSpec::Gaussian {
                mean: mean.clone(),
                cov: cov.clone(),
            }),
        };
        let direct = NoiseSpec::Gaussian {
            mean: &g * &mean,
            cov: symmetrize(&(&g * &cov * g.transpose())),
        };
        let s1 = noise_stats(&mapped, &qc).unwrap();
        let s2 = noise_stats(&direct, &qc).unwrap();
        assert_eq!(s1.mean, s2.mean);
        assert_eq!(s1.cov, s2.cov);
        assert_eq!(s1.m3, s2.m3);
        assert_eq!(s1.m4, s2.m4);
    }

    #[test]
    fn nested_linear_maps_compose() {
        let g1 = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let g2 = DMatrix::from_element(1, 1, 2.0);
        let inner = bernoulli_beta4();
        let nested = NoiseSpec::LinearMap {
            g: g1.clone(),
            inner: Box::new(NoiseSpec::LinearMap {
                g: g2.clone(),
                inner: Box::new(inner.clone()),
            }),
        };
        let flat = NoiseSpec::LinearMap {
            g: &g1 * &g2,
            inner: Box::new(inner),
        };
        let qc = DMatrix::identity(2, 2);
        let s1 = noise_stats(&nested, &qc).unwrap();
        let s2 = noise_stats(&flat, &qc).unwrap();
        assert_eq!(s1.mean, s2.mean);
        assert_eq!(s1.cov, s2.cov);
        assert_eq!(s1.m3, s2.m3);
        assert_eq!(s1.m4, s2.m4);
    }

    #[test]
    fn empirical_stats_of_constant_rows_vanish() {
        let samples = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let stats = empirical_stats(&samples, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(stats.mean, DVector::from_row_slice(&[1.0, 2.0]));
        assert_eq!(stats.cov.amax(), 0.0);
        assert_eq!(stats.m3.amax(), 0.0);
        assert_eq!(stats.m4, 0.0);
    }

    #[test]
    fn empirical_stats_reject_single_sample() {
        let samples = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(matches!(
            empirical_stats(&samples, &qc1()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn empirical_stats_match_enumeration_on_exact_frequencies() {
        // 1 copy of the atom 4 and 3 copies of 0 reproduce the two-atom law.
        let samples = DMatrix::from_row_slice(4, 1, &[4.0, 0.0, 0.0, 0.0]);
        let stats = empirical_stats(&samples, &qc1()).unwrap();
        assert_relative_eq!(stats.mean[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(stats.cov[(0, 0)], 3.0, epsilon = 1e-12);
        assert_relative_eq!(stats.m3[0], 6.0, epsilon = 1e-12);
        assert_relative_eq!(stats.m4, 12.0, epsilon = 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_batch_independent() {
        let spec = NoiseSpec::Gaussian {
            mean: DVector::from_row_slice(&[1.0, -1.0]),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
        };
        let a = sample(&spec, 42, 10).unwrap();
        let b = sample(&spec, 42, 10).unwrap();
        assert_eq!(a, b);
        let head = sample(&spec, 42, 4).unwrap();
        assert_eq!(a.view((0, 0), (4, 2)), head.view((0, 0), (4, 2)));
        let other_seed = sample(&spec, 43, 4).unwrap();
        assert_ne!(head, other_seed);
    }

    #[test]
    fn degenerate_sampling_repeats_the_value() {
        let spec = NoiseSpec::Degenerate {
            value: DVector::from_row_slice(&[1.0, 2.0]),
        };
        let rows = sample(&spec, 9, 3).unwrap();
        for i in 0..3 {
            assert_eq!(rows.row(i).transpose(), DVector::from_row_slice(&[1.0, 2.0]));
        }
    }

    #[test]
    fn discrete_sampling_hits_only_atoms() {
        let rows = sample(&bernoulli_beta4(), 3, 1000).unwrap();
        assert!(rows.iter().all(|v| *v == 4.0 || *v == 0.0));
        let frac = rows.iter().filter(|v| **v == 4.0).count() as f64 / 1000.0;
        assert!((frac - 0.25).abs() < 0.05, "atom frequency {frac}");
    }

    proptest! {
        /// Scaling the weighting scales (M3, m4) by (c, c²) and leaves the
        /// mean and covariance untouched.
        #[test]
        fn weighting_scale_covariance(c in 0.1f64..10.0) {
            let spec = bernoulli_beta4();
            let base = noise_stats(&spec, &qc1()).unwrap();
            let scaled = noise_stats(&spec, &DMatrix::from_element(1, 1, c)).unwrap();
            prop_assert_eq!(scaled.mean, base.mean);
            prop_assert_eq!(scaled.cov, base.cov);
            prop_assert!((scaled.m3[0] - c * base.m3[0]).abs() <= 1e-9 * (1.0 + scaled.m3[0].abs()));
            prop_assert!((scaled.m4 - c * c * base.m4).abs() <= 1e-9 * (1.0 + scaled.m4.abs()));
        }
    }
}
