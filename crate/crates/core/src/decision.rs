//! The decision layer: decision variables `z_i = w_i · y`, the two losses of
//! the `l(x) = -[z_c(x) - f(z(x))]` family, and the two closed-form weight
//! solutions.
//!
//! Loss values keep that sign convention. The quadratic loss
//! `-[z_c - ½ Σ z_i²]` is negative on well-fit samples, so minimizing it
//! pushes the correct-class value up and the others down.

use crate::dataset::{ClassSums, LabeledDataset};
use crate::gram::GramSystem;
use crate::{CrestError, Matrix, Result};

/// `N x K`, column `i` is `w_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionWeights {
    columns: Matrix,
}

impl DecisionWeights {
    pub fn new(columns: Matrix) -> Result<Self> {
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(CrestError::InvalidInput("decision weights must be finite".into()));
        }
        Ok(Self { columns })
    }

    pub(crate) fn from_columns_unchecked(columns: Matrix) -> Self {
        Self { columns }
    }

    pub fn columns(&self) -> &Matrix {
        &self.columns
    }

    pub fn into_columns(self) -> Matrix {
        self.columns
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.columns.iter().all(|v| v.is_finite())
    }

    /// `K x |X|` matrix of `z_i(x)` for the columns of `features`.
    pub fn decision_values(&self, features: &Matrix) -> Result<Matrix> {
        if features.nrows() != self.dim() {
            return Err(CrestError::DimensionMismatch(format!(
                "weights expect {} features, got {}",
                self.dim(),
                features.nrows()
            )));
        }
        Ok(self.columns.tr_mul(features))
    }
}

/// Index of the largest entry, smallest index on ties.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// The class maximizing `w_i · y`.
pub fn predict(w: &DecisionWeights, y: &[f64]) -> Result<usize> {
    if y.len() != w.dim() {
        return Err(CrestError::DimensionMismatch(format!(
            "weights expect {} features, got {}",
            w.dim(),
            y.len()
        )));
    }
    let y = nalgebra::DVectorView::from_slice(y, y.len());
    Ok(argmax(w.columns().column_iter().map(|col| col.dot(&y))))
}

/// Predictions for every column of `features`.
pub fn predict_all(w: &DecisionWeights, features: &Matrix) -> Result<Vec<usize>> {
    let z = w.decision_values(features)?;
    Ok(z.column_iter().map(|col| argmax(col.iter().copied())).collect())
}

/// Fraction of samples whose prediction equals the label.
pub fn accuracy(w: &DecisionWeights, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(CrestError::InvalidInput("accuracy of an empty dataset".into()));
    }
    let predicted = predict_all(w, ds.features())?;
    let hits = predicted.iter().zip(ds.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// `p_i = e^{z_i} / Σ_j e^{z_j}`, shifted by `max z` so it never overflows.
pub fn softmax_posteriors(z: &[f64]) -> Vec<f64> {
    let shift = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - shift).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(z: impl Iterator<Item = f64> + Clone) -> f64 {
    let shift = z.clone().fold(f64::NEG_INFINITY, f64::max);
    shift + z.map(|v| (v - shift).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `f(z) = ln Σ e^{z_i}`.
    CrossEntropy,
    /// `f(z) = ½ Σ z_i²`.
    Quadratic,
}

/// Batch loss `L = Σ_x l(x)` and its gradient, column `i` being `∇_{w_i} L`.
///
/// For the quadratic loss the gradient is `-[M_i - (YY') w_i]`; for cross
/// entropy it is `-Σ_x [δ_{ic(x)} - p_i(x)] y(x)`.
pub fn loss_and_grad(kind: LossKind, w: &DecisionWeights, ds: &LabeledDataset) -> Result<(f64, Matrix)> {
    if w.num_classes() != ds.num_classes() {
        return Err(CrestError::DimensionMismatch(format!(
            "weights have {} classes, dataset {}",
            w.num_classes(),
            ds.num_classes()
        )));
    }
    if ds.is_empty() {
        return Err(CrestError::InvalidInput("loss of an empty dataset".into()));
    }
    let z = w.decision_values(ds.features())?;
    let mut residual = ds.indicators();
    let mut loss = 0.0;
    for (j, &c) in ds.labels().iter().enumerate() {
        let col = z.column(j);
        let f = match kind {
            LossKind::CrossEntropy => log_sum_exp(col.iter().copied()),
            LossKind::Quadratic => 0.5 * col.norm_squared(),
        };
        loss -= col[c] - f;
        match kind {
            LossKind::CrossEntropy => {
                let p = softmax_posteriors(col.as_slice());
                for (i, pi) in p.into_iter().enumerate() {
                    residual[(i, j)] -= pi;
                }
            }
            LossKind::Quadratic => {
                let mut r = residual.column_mut(j);
                r -= col;
            }
        }
    }
    // -Σ_x [δ - q(x)] y(x)', with q = p or z.
    let grad = -(ds.features() * residual.transpose());
    Ok((loss, grad))
}

/// `w_i = ρ M_i`, the stationary point of the batch quadratic loss.
pub fn computed_weights(gs: &GramSystem, ms: &ClassSums) -> Result<DecisionWeights> {
    check_dims(gs, ms)?;
    DecisionWeights::new(gs.solve(ms.columns()))
}

fn check_dims(gs: &GramSystem, ms: &ClassSums) -> Result<()> {
    if gs.dim() != ms.columns().nrows() {
        return Err(CrestError::DimensionMismatch(format!(
            "Gram is {0}x{0} but class sums have dimension {1}",
            gs.dim(),
            ms.columns().nrows()
        )));
    }
    Ok(())
}

/// Stationary point of `Σ_x z_c(x)` subject to `Σ_{i,x} z_i(x)² = σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianSolution {
    /// `w_i = (σ / Z) ρ M_i`.
    pub weights: DecisionWeights,
    /// `Z = sqrt(Σ_i M_i' ρ M_i)`.
    pub z: f64,
    /// The multiplier, `Z / 2σ`.
    pub lambda: f64,
    pub sigma: f64,
    /// The constrained maximum `Σ_i w_i' M_i = σ Z`.
    pub objective: f64,
}

pub fn lagrangian_solve(gs: &GramSystem, ms: &ClassSums, sigma: f64) -> Result<LagrangianSolution> {
    check_dims(gs, ms)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CrestError::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    if ms.columns().iter().all(|&v| v == 0.0) {
        return Err(CrestError::DegenerateObjective);
    }
    let rho_m = gs.solve(ms.columns());
    let z_squared = ms.columns().dot(&rho_m);
    if !(z_squared > 0.0) || !z_squared.is_finite() {
        return Err(CrestError::DegenerateObjective);
    }
    let z = z_squared.sqrt();
    let weights = DecisionWeights::new(rho_m * (sigma / z))?;
    let objective = weights.columns().dot(ms.columns());
    Ok(LagrangianSolution {
        weights,
        z,
        lambda: z / (2.0 * sigma),
        sigma,
        objective,
    })
}

/// `Σ_{i,x} z_i(x)²` evaluated sample by sample.
pub fn constraint_value(w: &DecisionWeights, features: &Matrix) -> Result<f64> {
    Ok(w.decision_values(features)?.norm_squared())
}
