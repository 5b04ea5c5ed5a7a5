//! JSON run-configuration schema and conversion into the library types.

use nalgebra::{DMatrix, DVector};
use risklqr::model::{CostSpec, MixtureComponent, NoiseSpec, SystemModel};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub cost: CostConfig,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub budget: Option<BudgetConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default)]
    pub qc: Option<Vec<Vec<f64>>>,
}

/// Exactly one of the three fields must be present.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub epsilon_bar: Option<f64>,
    #[serde(default)]
    pub mu: Option<f64>,
}

/// The resolved budget form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Epsilon(f64),
    EpsilonBar(f64),
    Mu(f64),
}

impl BudgetConfig {
    pub fn resolve(&self) -> Result<Budget, String> {
        match (self.epsilon, self.epsilon_bar, self.mu) {
            (Some(e), None, None) => Ok(Budget::Epsilon(e)),
            (None, Some(e), None) => Ok(Budget::EpsilonBar(e)),
            (None, None, Some(m)) => Ok(Budget::Mu(m)),
            _ => Err(
                "budget must contain exactly one of `epsilon`, `epsilon_bar`, or `mu`".into(),
            ),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Synthesize the stationary policy (direct-μ budgets only).
    pub steady: bool,
    /// Fixed-point tolerance of the steady-state value iteration.
    pub tol: f64,
    pub max_iter: usize,
    pub mu_max: f64,
    pub tol_rel: f64,
    pub max_doublings: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            steady: false,
            tol: risklqr::riccati::DEFAULT_ARE_TOL,
            max_iter: risklqr::riccati::DEFAULT_ARE_MAX_ITER,
            mu_max: 1e12,
            tol_rel: 1e-9,
            max_doublings: 60,
        }
    }
}

impl SolverConfig {
    pub fn bisection(&self) -> risklqr::BisectionOptions {
        risklqr::BisectionOptions {
            mu_max: self.mu_max,
            tol_rel: self.tol_rel,
            max_doublings: self.max_doublings,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    pub n_rollouts: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_rollouts: 500,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    Degenerate {
        value: Vec<f64>,
    },
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        components: Vec<ComponentConfig>,
    },
    FiniteDiscrete {
        atoms: Vec<Vec<f64>>,
        probs: Vec<f64>,
    },
    Empirical {
        samples: Vec<Vec<f64>>,
    },
    LinearMap {
        g: Vec<Vec<f64>>,
        inner: Box<NoiseConfig>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

pub fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, String> {
    if rows.is_empty() {
        return Err(format!("{what} must have at least one row"));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("{what} rows must be nonempty and equally sized"));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &data))
}

pub fn vector(entries: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(entries)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("config: {e}"))
    }

    pub fn model(&self) -> Result<SystemModel, String> {
        SystemModel::new(
            matrix(&self.model.a, "model.a")?,
            matrix(&self.model.b, "model.b")?,
            vector(&self.model.x0),
            self.model.horizon,
        )
        .map_err(|e| e.to_string())
    }

    /// `epsilon` in the cost spec is a placeholder unless the budget supplies
    /// one; callers using ε go through [`Budget::Epsilon`].
    pub fn cost(&self) -> Result<CostSpec, String> {
        let epsilon = match self.budget.as_ref().map(|b| b.resolve()) {
            Some(Ok(Budget::Epsilon(e))) => e,
            _ => 0.0,
        };
        CostSpec::new(
            matrix(&self.cost.q, "cost.q")?,
            matrix(&self.cost.r, "cost.r")?,
            self.cost
                .qc
                .as_ref()
                .map(|qc| matrix(qc, "cost.qc"))
                .transpose()?,
            epsilon,
        )
        .map_err(|e| e.to_string())
    }

    pub fn noise(&self) -> Result<NoiseSpec, String> {
        noise_spec(&self.noise)
    }
}

fn noise_spec(config: &NoiseConfig) -> Result<NoiseSpec, String> {
    Ok(match config {
        NoiseConfig::Degenerate { value } => NoiseSpec::Degenerate {
            value: vector(value),
        },
        NoiseConfig::Gaussian { mean, cov } => NoiseSpec::Gaussian {
            mean: vector(mean),
            cov: matrix(cov, "noise.cov")?,
        },
        NoiseConfig::GaussianMixture {
            weights,
            components,
        } => NoiseSpec::GaussianMixture {
            weights: weights.clone(),
            components: components
                .iter()
                .map(|c| {
                    Ok(MixtureComponent {
                        mean: vector(&c.mean),
                        cov: matrix(&c.cov, "component.cov")?,
                    })
                })
                .collect::<Result<Vec<_>, String>>()?,
        },
        NoiseConfig::FiniteDiscrete { atoms, probs } => NoiseSpec::FiniteDiscrete {
            atoms: atoms.iter().map(|a| vector(a)).collect(),
            probs: probs.clone(),
        },
        NoiseConfig::Empirical { samples } => NoiseSpec::Empirical {
            samples: matrix(samples, "noise.samples")?,
        },
        NoiseConfig::LinearMap { g, inner } => NoiseSpec::LinearMap {
            g: matrix(g, "noise.g")?,
            inner: Box::new(noise_spec(inner)?),
        },
    })
}
