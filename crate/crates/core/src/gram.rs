//! The Gram matrix `YY'`, its regularized inverse `ρ`, and the trace-based
//! learnability diagnostics.

use std::fmt;

use nalgebra::SymmetricEigen;

use crate::dataset::LabeledDataset;
use crate::{CrestError, Matrix, Result};

/// Ridge multiplier for the `auto` fallback, relative to the mean diagonal.
pub const AUTO_RIDGE_SCALE: f64 = 1e-10;

/// Effective learning needs `αλmax` below this (oscillation under 25%).
pub const MAX_STEP_PRODUCT: f64 = 0.25;
/// ... and `αλmin` above this (25% progress in 100 iterations).
pub const MIN_STEP_PRODUCT: f64 = 0.0025;
/// Eigenvalue-ratio threshold for effective gradient-descent learning.
pub const LEARNABLE_RATIO: f64 = 500.0;

/// How the regularization `ε` in `(YY' + εI)^-1` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RidgePolicy {
    /// Try `ε = 0`; if the factorization is numerically singular, retry with
    /// `ε = 1e-10 * trace / N`.
    #[default]
    Auto,
    /// Always use this `ε`.
    Fixed(f64),
    /// `ε = 0`, fail on any non-positive pivot.
    None,
}

impl fmt::Display for RidgePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RidgePolicy::Auto => write!(f, "auto"),
            RidgePolicy::None => write!(f, "none"),
            RidgePolicy::Fixed(eps) => write!(f, "{eps:e}"),
        }
    }
}

impl std::str::FromStr for RidgePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "auto" => Ok(RidgePolicy::Auto),
            "none" => Ok(RidgePolicy::None),
            other => match other.parse::<f64>() {
                Ok(eps) if eps >= 0.0 && eps.is_finite() => Ok(RidgePolicy::Fixed(eps)),
                _ => Err(format!("expected `auto`, `none` or a non-negative number, got `{other}`")),
            },
        }
    }
}

/// Lower-triangular Cholesky factor `L` with `A = LL'`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    lower: Matrix,
}

impl SpdFactor {
    /// Factors a symmetric matrix, reading only its lower triangle. Returns
    /// `None` if some pivot is not above `min_pivot` or is not finite.
    pub fn new(a: &Matrix, min_pivot: f64) -> Option<Self> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut col = a.view((j, j), (n - j, 1)).into_owned();
            if j > 0 {
                let left = l.view((j, 0), (n - j, j));
                let row = l.view((j, 0), (1, j));
                col -= left * row.transpose();
            }
            let pivot = col[0];
            if !(pivot > min_pivot) || !pivot.is_finite() {
                return None;
            }
            let d = pivot.sqrt();
            l[(j, j)] = d;
            for i in 1..n - j {
                l[(j + i, j)] = col[i] / d;
            }
        }
        Some(Self { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Solves `LL' x = b` for every column of `b`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a positive diagonal")
    }
}

/// `YY'` together with its factorization and regularized inverse.
#[derive(Debug, Clone)]
pub struct GramSystem {
    gram: Matrix,
    rho: Matrix,
    ridge: f64,
    trace_gram: f64,
    trace_rho: f64,
    factor: SpdFactor,
}

/// Gram system of the dataset's feature columns.
pub fn build_gram(ds: &LabeledDataset, policy: RidgePolicy) -> Result<GramSystem> {
    GramSystem::from_features(ds.features(), policy)
}

impl GramSystem {
    /// `features` is `N x |X|`, one sample per column.
    pub fn from_features(features: &Matrix, policy: RidgePolicy) -> Result<Self> {
        if features.ncols() == 0 {
            return Err(CrestError::InvalidInput("Gram matrix of an empty sample set".into()));
        }
        let gram = features * features.transpose();
        Self::from_gram(symmetrized(gram), policy)
    }

    /// Wraps an already formed symmetric positive semi-definite matrix.
    pub fn from_gram(gram: Matrix, policy: RidgePolicy) -> Result<Self> {
        let n = gram.nrows();
        if n == 0 || gram.ncols() != n {
            return Err(CrestError::DimensionMismatch(format!(
                "Gram matrix must be square and non-empty, got {}x{}",
                gram.nrows(),
                gram.ncols()
            )));
        }
        let trace_gram = gram.trace();
        let max_diag = gram.diagonal().max();
        let singular = || CrestError::SingularGram { trace_gram };

        let (ridge, factor) = match policy {
            RidgePolicy::None => (0.0, SpdFactor::new(&gram, 0.0).ok_or_else(singular)?),
            RidgePolicy::Fixed(eps) => (eps, SpdFactor::new(&shifted(&gram, eps), 0.0).ok_or_else(singular)?),
            RidgePolicy::Auto => {
                // Pivots at rounding level mean the samples do not span the
                // feature space; accepting them would amplify noise.
                let noise_floor = n as f64 * f64::EPSILON * max_diag;
                match SpdFactor::new(&gram, noise_floor) {
                    Some(factor) => (0.0, factor),
                    None => {
                        let eps = AUTO_RIDGE_SCALE * trace_gram / n as f64;
                        if !(eps > 0.0) {
                            return Err(singular());
                        }
                        let factor = SpdFactor::new(&shifted(&gram, eps), 0.0).ok_or_else(singular)?;
                        (eps, factor)
                    }
                }
            }
        };

        let rho = symmetrized(factor.solve(&Matrix::identity(n, n)));
        let trace_rho = rho.trace();
        Ok(Self {
            gram,
            rho,
            ridge,
            trace_gram,
            trace_rho,
            factor,
        })
    }

    /// `YY'`.
    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    /// `(YY' + εI)^-1`.
    pub fn rho(&self) -> &Matrix {
        &self.rho
    }

    /// The `ε` actually applied.
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn trace_gram(&self) -> f64 {
        self.trace_gram
    }

    pub fn trace_rho(&self) -> f64 {
        self.trace_rho
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    /// `(YY' + εI)^-1 b` through the factorization.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        self.factor.solve(b)
    }

    /// Largest entry of `|ρ(YY' + εI) - I|`.
    pub fn inverse_residual(&self) -> f64 {
        let n = self.dim();
        let product = &self.rho * shifted(&self.gram, self.ridge);
        (product - Matrix::identity(n, n)).abs().max()
    }
}

fn shifted(gram: &Matrix, eps: f64) -> Matrix {
    let mut g = gram.clone();
    for i in 0..g.nrows() {
        g[(i, i)] += eps;
    }
    g
}

fn symmetrized(m: Matrix) -> Matrix {
    (&m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralMethod {
    /// Full symmetric eigendecomposition.
    Exact,
    /// Only the trace bound, which needs no decomposition.
    TraceOnly,
}

/// Eigenvalue extremes of `YY'` and the trace lower bound on their ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralSummary {
    pub lambda_max: Option<f64>,
    pub lambda_min: Option<f64>,
    /// `λmax / λmin`, infinite when `λmin` is zero.
    pub ratio: Option<f64>,
    /// `Tr(YY') Tr(ρ) / N²`, a lower bound on `ratio`.
    pub trace_bound: f64,
}

/// `(1/N²) Tr(G) Tr(G^-1)`.
pub fn trace_bound(trace_gram: f64, trace_inverse: f64, dim: usize) -> f64 {
    let n = dim as f64;
    trace_gram * trace_inverse / (n * n)
}

pub fn spectral_summary(gs: &GramSystem, method: SpectralMethod) -> Result<SpectralSummary> {
    let bound = trace_bound(gs.trace_gram(), gs.trace_rho(), gs.dim());
    match method {
        SpectralMethod::TraceOnly => Ok(SpectralSummary {
            lambda_max: None,
            lambda_min: None,
            ratio: None,
            trace_bound: bound,
        }),
        SpectralMethod::Exact => {
            let (lmax, lmin) = eigen_extremes(gs.gram())?;
            let ratio = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
            Ok(SpectralSummary {
                lambda_max: Some(lmax),
                lambda_min: Some(lmin),
                ratio: Some(ratio),
                trace_bound: bound,
            })
        }
    }
}

/// Symmetric eigendecomposition `G = D Λ D'`.
pub fn eigen(gram: &Matrix) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(gram.clone(), f64::EPSILON, 100_000).ok_or(CrestError::EigenFailure)
}

/// `(λmax, λmin)` with rounding-level negatives clamped to zero.
fn eigen_extremes(gram: &Matrix) -> Result<(f64, f64)> {
    let values = eigen(gram)?.eigenvalues;
    let lmax = values.max().max(0.0);
    let lmin = values.min().max(0.0);
    Ok((lmax, lmin))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Learnability {
    Learnable,
    Marginal,
    Unlearnable,
}

impl fmt::Display for Learnability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Learnability::Learnable => "learnable",
            Learnability::Marginal => "marginal",
            Learnability::Unlearnable => "unlearnable",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub learnability: Learnability,
    pub rationale: String,
}

/// Whether plain gradient descent on the decision layer can be expected to
/// learn, judged against the eigenvalue-ratio threshold of 500.
pub fn learnability_verdict(ss: &SpectralSummary) -> Verdict {
    let criterion = format!(
        "effective learning needs alpha*lambda_max < {MAX_STEP_PRODUCT} and alpha*lambda_min > {MIN_STEP_PRODUCT}, \
         i.e. lambda_max/lambda_min < {LEARNABLE_RATIO}"
    );
    if ss.trace_bound >= LEARNABLE_RATIO {
        return Verdict {
            learnability: Learnability::Unlearnable,
            rationale: format!(
                "trace bound {:.3e} >= {LEARNABLE_RATIO}: with alpha*lambda_max = {MAX_STEP_PRODUCT}, \
                 alpha*lambda_min <= {:.3e}; {criterion}",
                ss.trace_bound,
                MAX_STEP_PRODUCT / ss.trace_bound
            ),
        };
    }
    match ss.ratio {
        Some(ratio) if ratio < LEARNABLE_RATIO => Verdict {
            learnability: Learnability::Learnable,
            rationale: format!(
                "eigenvalue ratio {ratio:.3e} < {LEARNABLE_RATIO}: with alpha*lambda_max = {MAX_STEP_PRODUCT}, \
                 alpha*lambda_min = {:.3e}; {criterion}",
                MAX_STEP_PRODUCT / ratio
            ),
        },
        Some(ratio) => Verdict {
            learnability: Learnability::Marginal,
            rationale: format!(
                "trace bound {:.3e} < {LEARNABLE_RATIO} but eigenvalue ratio {ratio:.3e} is not: \
                 with alpha*lambda_max = {MAX_STEP_PRODUCT}, alpha*lambda_min = {:.3e}; {criterion}",
                ss.trace_bound,
                MAX_STEP_PRODUCT / ratio
            ),
        },
        None => Verdict {
            learnability: Learnability::Marginal,
            rationale: format!(
                "trace bound {:.3e} < {LEARNABLE_RATIO} does not settle the eigenvalue ratio, which was not \
                 computed; alpha*lambda_min could be as large as {:.3e} at alpha*lambda_max = {MAX_STEP_PRODUCT}; \
                 {criterion}",
                ss.trace_bound,
                MAX_STEP_PRODUCT / ss.trace_bound
            ),
        },
    }
}
