//! Gradient descent on the decision layer under the quadratic loss.
//!
//! The batch update `w ← w + α[M - (YY')w]` is a linear recursion whose
//! error along each eigenvector of `YY'` is multiplied by `1 - αλ` per step.
//! Preconditioning the update with `ρ` replaces every such factor by
//! `1 - α`.

use std::fmt;

use crate::dataset::ClassSums;
use crate::decision::DecisionWeights;
use crate::gram::{eigen, GramSystem, SpectralSummary, MIN_STEP_PRODUCT};
use crate::{CrestError, Matrix, Result};

/// The `n`-th iterate of a descent run.
#[derive(Debug, Clone, PartialEq)]
pub struct GDState {
    pub weights: DecisionWeights,
    pub iteration: usize,
    pub alpha: f64,
    /// Set once an iterate stops being finite; the iterate is kept as is.
    pub diverged: bool,
}

impl GDState {
    pub fn new(weights: DecisionWeights, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(CrestError::InvalidInput(format!("learning rate must be positive, got {alpha}")));
        }
        Ok(Self {
            weights,
            iteration: 0,
            alpha,
            diverged: false,
        })
    }

    fn advance(&self, next: Matrix) -> Self {
        let diverged = self.diverged || next.iter().any(|v| !v.is_finite());
        Self {
            weights: DecisionWeights::from_columns_unchecked(next),
            iteration: self.iteration + 1,
            alpha: self.alpha,
            diverged,
        }
    }
}

fn check_dims(state: &GDState, gs: &GramSystem, ms: &ClassSums) -> Result<()> {
    let w = state.weights.columns();
    if w.nrows() != gs.dim() || w.shape() != ms.columns().shape() {
        return Err(CrestError::DimensionMismatch(format!(
            "weights {:?}, Gram {}x{}, class sums {:?}",
            w.shape(),
            gs.dim(),
            gs.dim(),
            ms.columns().shape()
        )));
    }
    Ok(())
}

/// `ρ M`, the common fixed point of both descent schemes.
pub fn equilibrium(gs: &GramSystem, ms: &ClassSums) -> Matrix {
    gs.solve(ms.columns())
}

/// One plain step, `w ← [I - α(YY')] w + α M`.
pub fn gd_step(state: &GDState, gs: &GramSystem, ms: &ClassSums) -> Result<GDState> {
    check_dims(state, gs, ms)?;
    let w = state.weights.columns();
    let residual = ms.columns() - gs.gram() * w;
    Ok(state.advance(w + residual * state.alpha))
}

/// `w^(n) = ρM + D (I - αΛ)^n D' (w^(0) - ρM)`, from the eigendecomposition
/// `YY' = D Λ D'`.
pub fn closed_form_trajectory(
    w0: &DecisionWeights,
    gs: &GramSystem,
    ms: &ClassSums,
    alpha: f64,
    n: usize,
) -> Result<DecisionWeights> {
    check_dims(&GDState::new(w0.clone(), alpha)?, gs, ms)?;
    if n == 0 {
        return Ok(w0.clone());
    }
    let eig = eigen(gs.gram())?;
    let fixed = equilibrium(gs, ms);
    let mut coords = eig.eigenvectors.tr_mul(&(w0.columns() - &fixed));
    for (r, lambda) in eig.eigenvalues.iter().enumerate() {
        let factor = power(1.0 - alpha * lambda, n);
        coords.row_mut(r).scale_mut(factor);
    }
    Ok(DecisionWeights::from_columns_unchecked(fixed + &eig.eigenvectors * coords))
}

fn power(base: f64, n: usize) -> f64 {
    match i32::try_from(n) {
        Ok(k) => base.powi(k),
        Err(_) => base.powf(n as f64),
    }
}

/// One preconditioned step, `w ← w + α ρ [M - (YY')w]`.
///
/// Evaluated as `w + α(ρM - w) + αε ρw`, which equals the above because
/// `ρ(YY' + εI) = I`. Forming `M - (YY')w` first would cancel
/// catastrophically near the fixed point and leave an error of order
/// `cond(YY') · machine epsilon` after the solve.
pub fn modified_gd_step(state: &GDState, gs: &GramSystem, ms: &ClassSums) -> Result<GDState> {
    check_dims(state, gs, ms)?;
    let w = state.weights.columns();
    let mut delta = equilibrium(gs, ms) - w;
    if gs.ridge() > 0.0 {
        delta += gs.solve(w) * gs.ridge();
    }
    Ok(state.advance(w + delta * state.alpha))
}

/// `w^(n) = ρM + (1 - α)^n (w^(0) - ρM)`.
pub fn modified_closed_form(w0: &DecisionWeights, gs: &GramSystem, ms: &ClassSums, alpha: f64, n: usize) -> DecisionWeights {
    let fixed = equilibrium(gs, ms);
    let decay = power(1.0 - alpha, n);
    DecisionWeights::from_columns_unchecked(&fixed + (w0.columns() - &fixed) * decay)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Divergent,
    Oscillatory,
    Convergent,
    Stalled,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Divergent => "divergent",
            Regime::Oscillatory => "oscillatory",
            Regime::Convergent => "convergent",
            Regime::Stalled => "stalled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeReport {
    pub regime: Regime,
    pub alpha_lambda_max: f64,
    pub alpha_lambda_min: f64,
}

/// Classifies plain descent with rate `alpha` from the eigenvalue extremes.
///
/// Divergent above `αλmax = 2`, oscillatory on `(1, 2]`, stalled when
/// `αλmin <= 0.0025`, convergent otherwise.
pub fn classify_regime(ss: &SpectralSummary, alpha: f64) -> Result<RegimeReport> {
    let (Some(lmax), Some(lmin)) = (ss.lambda_max, ss.lambda_min) else {
        return Err(CrestError::MissingEigenvalues);
    };
    Ok(classify_products(alpha * lmax, alpha * lmin))
}

pub fn classify_products(alpha_lambda_max: f64, alpha_lambda_min: f64) -> RegimeReport {
    let regime = if alpha_lambda_max > 2.0 {
        Regime::Divergent
    } else if alpha_lambda_max > 1.0 {
        Regime::Oscillatory
    } else if alpha_lambda_min <= MIN_STEP_PRODUCT {
        Regime::Stalled
    } else {
        Regime::Convergent
    };
    RegimeReport {
        regime,
        alpha_lambda_max,
        alpha_lambda_min,
    }
}
