//! Plant, cost, and noise descriptors plus numerical checks of the standing
//! assumptions (stabilizability, detectability, penalty definiteness).

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Default relative threshold for the Hautus rank tests.
pub const DEFAULT_HAUTUS_TOL: f64 = 1e-8;
/// Most negative eigenvalue tolerated before Q / Qc is reported indefinite.
pub const PSD_TOL: f64 = 1e-8;
/// Smallest eigenvalue of R accepted as positive definite.
pub const PD_TOL: f64 = 1e-12;

/// Discrete-time linear plant x_{t+1} = A x_t + B u_t + w_{t+1} with a
/// deterministic initial state and an optional finite horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub x0: DVector<f64>,
    /// Horizon N; `None` for steady-state-only use.
    pub horizon: Option<usize>,
}

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        x0: DVector<f64>,
        horizon: Option<usize>,
    ) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        if n == 0 {
            return Err(Error::InvalidInput("state dimension must be >= 1".into()));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!(
                "B must have {} rows, got {}",
                n,
                b.nrows()
            )));
        }
        if b.ncols() == 0 {
            return Err(Error::InvalidInput("input dimension must be >= 1".into()));
        }
        if x0.len() != n {
            return Err(Error::Dimension(format!(
                "x0 must have length {}, got {}",
                n,
                x0.len()
            )));
        }
        if horizon == Some(0) {
            return Err(Error::InvalidInput("horizon must be >= 1".into()));
        }
        for (name, m) in [("A", &a), ("B", &b)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("x0 has non-finite entries".into()));
        }
        Ok(Self { a, b, x0, horizon })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Horizon N, or an error for steady-state-only models.
    pub fn require_horizon(&self) -> Result<usize> {
        self.horizon
            .ok_or_else(|| Error::InvalidInput("operation requires a finite horizon".into()))
    }
}

/// Quadratic penalties and the risk budget. `qc` is the constraint weighting;
/// it defaults to `q` when not supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qc: DMatrix<f64>,
    pub epsilon: f64,
}

impl CostSpec {
    pub fn new(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        qc: Option<DMatrix<f64>>,
        epsilon: f64,
    ) -> Result<Self> {
        let qc = qc.unwrap_or_else(|| q.clone());
        for (name, m) in [("Q", &q), ("R", &r), ("Qc", &qc)] {
            if !m.is_square() {
                return Err(Error::Dimension(format!(
                    "{name} must be square, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
            let skew = (m - m.transpose()).amax();
            if skew > 1e-8 * (1.0 + m.amax()) {
                return Err(Error::InvalidInput(format!(
                    "{name} is not symmetric (max asymmetry {skew:.3e})"
                )));
            }
        }
        if qc.nrows() != q.nrows() {
            return Err(Error::Dimension(format!(
                "Qc must match Q ({}x{}), got {}x{}",
                q.nrows(),
                q.nrows(),
                qc.nrows(),
                qc.ncols()
            )));
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidInput(format!(
                "risk budget epsilon must be finite and >= 0, got {epsilon}"
            )));
        }
        // Store exactly symmetric copies so downstream recursions cannot
        // inherit asymmetry from the inputs.
        Ok(Self {
            q: symmetrize(&q),
            r: symmetrize(&r),
            qc: symmetrize(&qc),
            epsilon,
        })
    }
}

/// One component of a Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Distribution of the i.i.d. process noise w_t.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    /// Deterministic noise, w_t = value always.
    Degenerate { value: DVector<f64> },
    Gaussian {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        components: Vec<MixtureComponent>,
    },
    FiniteDiscrete {
        atoms: Vec<DVector<f64>>,
        probs: Vec<f64>,
    },
    /// Uniform distribution over the rows of `samples` (m x n, m >= 2).
    Empirical { samples: DMatrix<f64> },
    /// w = G d with d distributed per `inner`; e.g. disturbances entering
    /// through the input map, w = B (d - E d).
    LinearMap {
        g: DMatrix<f64>,
        inner: Box<NoiseSpec>,
    },
}

impl NoiseSpec {
    /// Dimension of the noise vector this spec produces.
    pub fn dim(&self) -> usize {
        match self {
            NoiseSpec::Degenerate { value } => value.len(),
            NoiseSpec::Gaussian { mean, .. } => mean.len(),
            NoiseSpec::GaussianMixture { components, .. } => {
                components.first().map_or(0, |c| c.mean.len())
            }
            NoiseSpec::FiniteDiscrete { atoms, .. } => atoms.first().map_or(0, |a| a.len()),
            NoiseSpec::Empirical { samples } => samples.ncols(),
            NoiseSpec::LinearMap { g, .. } => g.nrows(),
        }
    }

    /// Check the structural invariants: weights form a probability vector,
    /// covariances are symmetric, shapes line up, entries are finite.
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSpec::Degenerate { value } => {
                if value.is_empty() {
                    return Err(Error::InvalidInput("degenerate value must be nonempty".into()));
                }
                check_finite_vec("value", value)
            }
            NoiseSpec::Gaussian { mean, cov } => check_gaussian(mean, cov),
            NoiseSpec::GaussianMixture {
                weights,
                components,
            } => {
                if components.is_empty() {
                    return Err(Error::InvalidInput("mixture must have components".into()));
                }
                if weights.len() != components.len() {
                    return Err(Error::Dimension(format!(
                        "{} weights for {} components",
                        weights.len(),
                        components.len()
                    )));
                }
                check_probability_vector(weights)?;
                let n = components[0].mean.len();
                for c in components {
                    if c.mean.len() != n {
                        return Err(Error::Dimension(
                            "mixture components have mixed dimensions".into(),
                        ));
                    }
                    check_gaussian(&c.mean, &c.cov)?;
                }
                Ok(())
            }
            NoiseSpec::FiniteDiscrete { atoms, probs } => {
                if atoms.is_empty() {
                    return Err(Error::InvalidInput("discrete spec must have atoms".into()));
                }
                if atoms.len() != probs.len() {
                    return Err(Error::Dimension(format!(
                        "{} atoms for {} probabilities",
                        atoms.len(),
                        probs.len()
                    )));
                }
                check_probability_vector(probs)?;
                let n = atoms[0].len();
                for a in atoms {
                    if a.len() != n {
                        return Err(Error::Dimension("atoms have mixed dimensions".into()));
                    }
                    check_finite_vec("atom", a)?;
                }
                Ok(())
            }
            NoiseSpec::Empirical { samples } => {
                if samples.nrows() < 2 {
                    return Err(Error::InvalidInput(format!(
                        "empirical spec needs >= 2 samples, got {}",
                        samples.nrows()
                    )));
                }
                if samples.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput("samples have non-finite entries".into()));
                }
                Ok(())
            }
            NoiseSpec::LinearMap { g, inner } => {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput("G has non-finite entries".into()));
                }
                inner.validate()?;
                if g.ncols() != inner.dim() {
                    return Err(Error::Dimension(format!(
                        "G has {} columns but inner noise has dimension {}",
                        g.ncols(),
                        inner.dim()
                    )));
                }
                Ok(())
            }
        }
    }
}

fn check_gaussian(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<()> {
    check_finite_vec("mean", mean)?;
    if !cov.is_square() || cov.nrows() != mean.len() {
        return Err(Error::Dimension(format!(
            "covariance must be {}x{}, got {}x{}",
            mean.len(),
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("covariance has non-finite entries".into()));
    }
    let skew = (cov - cov.transpose()).amax();
    if skew > 1e-8 * (1.0 + cov.amax()) {
        return Err(Error::InvalidInput(format!(
            "covariance is not symmetric (max asymmetry {skew:.3e})"
        )));
    }
    let min_eig = symmetrize(cov)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig < -PSD_TOL * (1.0 + cov.amax()) {
        return Err(Error::InvalidInput(format!(
            "covariance is indefinite (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(())
}

fn check_probability_vector(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput(
            "probabilities must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "probabilities must sum to 1, got {total:.15}"
        )));
    }
    Ok(())
}

fn check_finite_vec(name: &str, v: &DVector<f64>) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
    }
    Ok(())
}

/// Outcome of the standing-assumption checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub stabilizable: bool,
    pub detectable: bool,
    pub psd_ok: bool,
    pub messages: Vec<String>,
}

impl ValidationReport {
    pub fn all_ok(&self) -> bool {
        self.stabilizable && self.detectable && self.psd_ok
    }
}

/// Numerically check stabilizability of (A, B), detectability of (A, Q^{1/2}),
/// and definiteness of the penalties.
///
/// A mode λ of A with |λ| >= 1 - tol counts as unstable; it passes the
/// stabilizability (resp. detectability) test when [A - λI, B] (resp. the
/// dual pencil with the square root of Q) has full numerical row rank, i.e.
/// its smallest singular value exceeds `tol` times its largest.
pub fn validate(model: &SystemModel, cost: &CostSpec, tol: f64) -> Result<ValidationReport> {
    let n = model.state_dim();
    if cost.q.nrows() != n {
        return Err(Error::Dimension(format!(
            "Q must be {}x{}, got {}x{}",
            n,
            n,
            cost.q.nrows(),
            cost.q.ncols()
        )));
    }
    if cost.r.nrows() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "R must be {0}x{0}, got {1}x{2}",
            model.input_dim(),
            cost.r.nrows(),
            cost.r.ncols()
        )));
    }
    if !tol.is_finite() || tol <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "tolerance must be finite and > 0, got {tol}"
        )));
    }

    let mut messages = Vec::new();

    let q_min = min_symmetric_eigenvalue(&cost.q);
    let qc_min = min_symmetric_eigenvalue(&cost.qc);
    let r_min = min_symmetric_eigenvalue(&cost.r);
    let mut psd_ok = true;
    if q_min < -PSD_TOL {
        psd_ok = false;
        messages.push(format!("Q is indefinite (min eigenvalue {q_min:.3e})"));
    }
    if qc_min < -PSD_TOL {
        psd_ok = false;
        messages.push(format!("Qc is indefinite (min eigenvalue {qc_min:.3e})"));
    }
    if r_min < PD_TOL {
        psd_ok = false;
        messages.push(format!(
            "R is not positive definite (min eigenvalue {r_min:.3e})"
        ));
    }

    let eigs = model.a.clone().complex_eigenvalues();

    let mut stabilizable = true;
    for lambda in eigs.iter() {
        if lambda.norm() < 1.0 - tol {
            continue;
        }
        if !pencil_full_row_rank(&model.a, &model.b, *lambda, tol) {
            stabilizable = false;
            messages.push(format!(
                "mode {:.6}{:+.6}i (|λ| = {:.6}) is uncontrollable",
                lambda.re,
                lambda.im,
                lambda.norm()
            ));
        }
    }

    // Detectability of (A, Q^{1/2}) is stabilizability of the dual pair
    // (A', (Q^{1/2})'); the square root is symmetric, so the dual pencil is
    // [A' - λI, Q^{1/2}]. Eigenvalues of A' equal those of A. When Q fails
    // the PSD check (already reported above), the probe still runs on the
    // nearest PSD matrix so the report stays complete.
    let sqrt_q = symmetric_sqrt(&cost.q).unwrap_or_else(|_| {
        let eig = symmetrize(&cost.q).symmetric_eigen();
        let clamped = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()))
    });
    let a_t = model.a.transpose();
    let mut detectable = true;
    for lambda in eigs.iter() {
        if lambda.norm() < 1.0 - tol {
            continue;
        }
        if !pencil_full_row_rank(&a_t, &sqrt_q, *lambda, tol) {
            detectable = false;
            messages.push(format!(
                "mode {:.6}{:+.6}i (|λ| = {:.6}) is unobservable under Q",
                lambda.re,
                lambda.im,
                lambda.norm()
            ));
        }
    }

    Ok(ValidationReport {
        stabilizable,
        detectable,
        psd_ok,
        messages,
    })
}

/// Largest eigenvalue magnitude of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "spectral radius needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    Ok(m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// True when [M - λI, C] has full numerical row rank: smallest singular value
/// greater than `tol` times the largest. Complex λ is handled through the
/// real 2n embedding [[Re, -Im], [Im, Re]], whose singular values are those
/// of the complex pencil, each doubled.
fn pencil_full_row_rank(m: &DMatrix<f64>, c: &DMatrix<f64>, lambda: Complex<f64>, tol: f64) -> bool {
    let n = m.nrows();
    let k = c.ncols();
    let sv = if lambda.im == 0.0 {
        let mut pencil = DMatrix::<f64>::zeros(n, n + k);
        pencil.view_mut((0, 0), (n, n)).copy_from(m);
        for i in 0..n {
            pencil[(i, i)] -= lambda.re;
        }
        pencil.view_mut((0, n), (n, k)).copy_from(c);
        pencil.singular_values()
    } else {
        let mut re = DMatrix::<f64>::zeros(n, n + k);
        re.view_mut((0, 0), (n, n)).copy_from(m);
        for i in 0..n {
            re[(i, i)] -= lambda.re;
        }
        re.view_mut((0, n), (n, k)).copy_from(c);
        let mut im = DMatrix::<f64>::zeros(n, n + k);
        for i in 0..n {
            im[(i, i)] = -lambda.im;
        }
        let mut embed = DMatrix::<f64>::zeros(2 * n, 2 * (n + k));
        embed.view_mut((0, 0), (n, n + k)).copy_from(&re);
        embed.view_mut((0, n + k), (n, n + k)).copy_from(&(-&im));
        embed.view_mut((n, 0), (n, n + k)).copy_from(&im);
        embed.view_mut((n, n + k), (n, n + k)).copy_from(&re);
        embed.singular_values()
    };
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > tol * max
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// [-1e-10, 0) are treated as rounding noise and clamped to zero; anything
/// more negative is rejected as indefinite.
pub(crate) fn symmetric_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = 1.0 + m.amax();
    let eig = symmetrize(m).symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-10 * scale {
                return Err(Error::Numerical(format!(
                    "matrix is indefinite (eigenvalue {:.3e}), no PSD square root",
                    *v
                )));
            }
            *v = 0.0;
        }
    }
    let sqrt_diag = DMatrix::from_diagonal(&vals.map(f64::sqrt));
    let root = &eig.eigenvectors * sqrt_diag * eig.eigenvectors.transpose();
    Ok(symmetrize(&root))
}

/// Exact symmetrization (M + M') / 2.
pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
