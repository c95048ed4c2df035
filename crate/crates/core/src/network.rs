//! The pre-decision network and how it is trained against `Z`.
//!
//! Layers compute `x^(m+1) = tanh(U^(m) x^(m))` with no bias. The decision
//! weights are never trained: for the current features `y` they are the
//! constrained maximizer `w_i = ρM_i / Z`, and the attained maximum
//! `Z = sqrt(Σ_i M_i' ρ M_i)` is the objective the layers ascend.
//!
//! Two gradients of `Z` are provided. [`exact_grad_z`] back-propagates
//! `∂Z/∂y(x) = Z^-1 Σ_i [δ_{ic(x)} - (ρM_i)'y(x)] ρM_i` through the tanh
//! derivatives. [`linearized_gradient`] drops the derivative factor
//! `1 - tanh²`, so the backward pass reduces to pulling the decision weights
//! back through transposed layer matrices, and each layer's gradient becomes
//! the rank-`K` outer product `w^(m) (μ^(m))'`.

use std::time::Instant;

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::dataset::{class_sums, LabeledDataset};
use crate::decision::{lagrangian_solve, predict_all, DecisionWeights, LagrangianSolution};
use crate::gram::{GramSystem, RidgePolicy};
use crate::runner::trajectory::{Trajectory, TrajectoryRow};
use crate::{CrestError, Matrix, Result};

/// Weight matrices `U^(1) .. U^(L)`, each `width_out x width_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    input_dim: usize,
    layers: Vec<Matrix>,
}

impl LayerStack {
    pub fn new(input_dim: usize, layers: Vec<Matrix>) -> Result<Self> {
        let mut width = input_dim;
        for (m, u) in layers.iter().enumerate() {
            if u.ncols() != width {
                return Err(CrestError::DimensionMismatch(format!(
                    "layer {} takes {} inputs but receives {width}",
                    m + 1,
                    u.ncols()
                )));
            }
            if u.nrows() == 0 {
                return Err(CrestError::InvalidInput(format!("layer {} has no outputs", m + 1)));
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(CrestError::InvalidInput(format!("layer {} has non-finite weights", m + 1)));
            }
            width = u.nrows();
        }
        Ok(Self { input_dim, layers })
    }

    /// No layers: the features pass through unchanged.
    pub fn empty(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: Vec::new(),
        }
    }

    /// Entries uniform on `(-gain/sqrt(fan_in), gain/sqrt(fan_in))`.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, widths: &[usize], gain: f64, rng: &mut R) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(CrestError::InvalidInput(format!("init gain must be positive, got {gain}")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &width in widths {
            if width == 0 || fan_in == 0 {
                return Err(CrestError::InvalidInput("layer widths must be positive".into()));
            }
            let bound = gain / (fan_in as f64).sqrt();
            let dist = Uniform::new(-bound, bound).map_err(|e| CrestError::InvalidInput(e.to_string()))?;
            layers.push(Matrix::from_fn(width, fan_in, |_, _| dist.sample(rng)));
            fan_in = width;
        }
        Self::new(input_dim, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |u| u.nrows())
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// The first `n` layers.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            input_dim: self.input_dim,
            layers: self.layers[..n.min(self.layers.len())].to_vec(),
        }
    }

    /// `U^(m) += step * deltas[m]` for every layer at once.
    pub fn apply_update(&mut self, deltas: &[Matrix], step: f64) -> Result<()> {
        if deltas.len() != self.layers.len()
            || deltas.iter().zip(&self.layers).any(|(d, u)| d.shape() != u.shape())
        {
            return Err(CrestError::DimensionMismatch("update shapes differ from the layers".into()));
        }
        for (u, d) in self.layers.iter_mut().zip(deltas) {
            *u += d * step;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|u| u.iter().all(|v| v.is_finite()))
    }

    /// Network output only, without keeping intermediate layers.
    pub fn output(&self, features: &Matrix) -> Result<Matrix> {
        self.check_input(features)?;
        let mut x = features.clone();
        for u in &self.layers {
            x = (u * &x).map(f64::tanh);
        }
        Ok(x)
    }

    fn check_input(&self, features: &Matrix) -> Result<()> {
        if features.nrows() != self.input_dim {
            return Err(CrestError::DimensionMismatch(format!(
                "network expects {} inputs, data has {}",
                self.input_dim,
                features.nrows()
            )));
        }
        Ok(())
    }
}

/// Every layer's input and pre-activation for a batch, plus the output.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[m]` is `x^(m+1)`, the input to layer `m + 1`; `inputs[0]` is
    /// the raw data.
    pub inputs: Vec<Matrix>,
    /// `U^(m) x^(m)` before the tanh.
    pub preactivations: Vec<Matrix>,
    /// `y(x)`, one column per sample.
    pub output: Matrix,
}

pub fn forward(stack: &LayerStack, ds: &LabeledDataset) -> Result<ForwardTrace> {
    forward_features(stack, ds.features())
}

pub fn forward_features(stack: &LayerStack, features: &Matrix) -> Result<ForwardTrace> {
    stack.check_input(features)?;
    let mut inputs = Vec::with_capacity(stack.num_layers());
    let mut preactivations = Vec::with_capacity(stack.num_layers());
    let mut x = features.clone();
    for u in stack.layers() {
        let pre = u * &x;
        let next = pre.map(f64::tanh);
        inputs.push(x);
        preactivations.push(pre);
        x = next;
    }
    Ok(ForwardTrace {
        inputs,
        preactivations,
        output: x,
    })
}

/// The Lagrangian decision layer (`σ = 1`) for the trace's output.
pub fn decision_layer(trace: &ForwardTrace, ds: &LabeledDataset, ridge: RidgePolicy) -> Result<LagrangianSolution> {
    let features = ds.with_features(trace.output.clone())?;
    let gs = GramSystem::from_features(features.features(), ridge)?;
    lagrangian_solve(&gs, &class_sums(&features), 1.0)
}

/// `Z = sqrt(Σ_i M_i' ρ M_i)` of the network output.
pub fn objective_z(trace: &ForwardTrace, ds: &LabeledDataset, ridge: RidgePolicy) -> Result<f64> {
    Ok(decision_layer(trace, ds, ridge)?.z)
}

/// `∂Z/∂U^(m)` for every layer, by exact backpropagation through tanh.
pub fn exact_grad_z(stack: &LayerStack, ds: &LabeledDataset, ridge: RidgePolicy) -> Result<Vec<Matrix>> {
    let trace = forward(stack, ds)?;
    let sol = decision_layer(&trace, ds, ridge)?;
    // ρM_i = (Z/σ) w_i with σ = 1.
    let rho_m = sol.weights.columns() * sol.z;
    let fitted = rho_m.tr_mul(&trace.output);
    let residual = ds.indicators() - fitted;
    // ∂Z/∂y(x), one column per sample.
    let d_output = &rho_m * residual / sol.z;

    let mut grads = vec![Matrix::zeros(0, 0); stack.num_layers()];
    let mut delta = d_output;
    for m in (0..stack.num_layers()).rev() {
        let out = if m + 1 == stack.num_layers() {
            &trace.output
        } else {
            &trace.inputs[m + 1]
        };
        delta.zip_apply(out, |d, t| *d *= 1.0 - t * t);
        grads[m] = &delta * trace.inputs[m].transpose();
        if m > 0 {
            delta = stack.layers()[m].tr_mul(&delta);
        }
    }
    Ok(grads)
}

/// Which residual weights the input class vectors `μ^(m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualForm {
    /// `δ_{ic(x)} - (ρM_i)'y(x)`: the bracket of the exact gradient, so the
    /// linearized gradient is the exact one with `tanh' = 1`.
    #[default]
    Exact,
    /// `δ_{ic(x)} - z_i(x)` with `z_i = w_i · y` from the normalized weights
    /// `ρM_i / Z`. Differs from `Exact` by the factor `Z` on the fit term.
    Normalized,
}

impl std::str::FromStr for ResidualForm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "exact" => Ok(ResidualForm::Exact),
            "normalized" => Ok(ResidualForm::Normalized),
            other => Err(format!("expected `exact` or `normalized`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for ResidualForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResidualForm::Exact => "exact",
            ResidualForm::Normalized => "normalized",
        })
    }
}

/// Equivalent decision weights and input class vectors for every layer.
#[derive(Debug, Clone)]
pub struct LinBPWorkspace {
    /// `w^(m)`, `width_out(m) x K`; the last entry is the decision weights.
    pub equivalent_weights: Vec<Matrix>,
    /// `μ^(m)`, `width_in(m) x K`.
    pub class_vectors: Vec<Matrix>,
    /// `z_i(x)`, `K x |X|`.
    pub z_values: Matrix,
}

/// Workspace with a freshly solved decision layer.
pub fn linbp_workspace(
    stack: &LayerStack,
    trace: &ForwardTrace,
    ds: &LabeledDataset,
    ridge: RidgePolicy,
    form: ResidualForm,
) -> Result<LinBPWorkspace> {
    let sol = decision_layer(trace, ds, ridge)?;
    linbp_workspace_with(stack, trace, ds, &sol, form)
}

/// Workspace for given decision weights, which may be stale.
///
/// `w^(L) = w`, `w^(m) = (U^(m+1))' w^(m+1)`, and
/// `μ_i^(m) = Σ_x r_i(x) x^(m)(x)` with `r` the residual selected by `form`.
pub fn linbp_workspace_with(
    stack: &LayerStack,
    trace: &ForwardTrace,
    ds: &LabeledDataset,
    decision: &LagrangianSolution,
    form: ResidualForm,
) -> Result<LinBPWorkspace> {
    let w = decision.weights.columns();
    if w.nrows() != trace.output.nrows() || w.ncols() != ds.num_classes() {
        return Err(CrestError::DimensionMismatch(format!(
            "decision weights {:?} for {} outputs and {} classes",
            w.shape(),
            trace.output.nrows(),
            ds.num_classes()
        )));
    }
    if trace.output.ncols() != ds.len() || trace.inputs.len() != stack.num_layers() {
        return Err(CrestError::DimensionMismatch("trace does not match stack and dataset".into()));
    }
    let z_values = w.tr_mul(&trace.output);
    let fit_scale = match form {
        ResidualForm::Exact => decision.z / decision.sigma,
        ResidualForm::Normalized => 1.0,
    };
    let residual_t = (ds.indicators() - &z_values * fit_scale).transpose();

    let n = stack.num_layers();
    let mut equivalent_weights = vec![Matrix::zeros(0, 0); n];
    let mut class_vectors = Vec::with_capacity(n);
    if n > 0 {
        equivalent_weights[n - 1] = w.clone();
        for m in (0..n - 1).rev() {
            equivalent_weights[m] = stack.layers()[m + 1].tr_mul(&equivalent_weights[m + 1]);
        }
    }
    for x in &trace.inputs {
        class_vectors.push(x * &residual_t);
    }
    Ok(LinBPWorkspace {
        equivalent_weights,
        class_vectors,
        z_values,
    })
}

/// `∇_{U^(m)} Z ≈ w^(m) (μ^(m))'` for every layer.
pub fn linearized_gradient(ws: &LinBPWorkspace) -> Vec<Matrix> {
    ws.equivalent_weights
        .iter()
        .zip(&ws.class_vectors)
        .map(|(w, mu)| w * mu.transpose())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinbpParams {
    /// Ascent step `β`.
    pub beta: f64,
    pub iterations: usize,
    /// Re-solve the decision layer every this many iterations.
    pub refresh_interval: usize,
    pub ridge: RidgePolicy,
    pub residual: ResidualForm,
}

impl Default for LinbpParams {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            iterations: 400,
            refresh_interval: 1,
            ridge: RidgePolicy::Auto,
            residual: ResidualForm::Exact,
        }
    }
}

/// Result of [`train_linbp`]. `abort` is set when training stopped early;
/// the trajectory then ends at the last completed evaluation.
#[derive(Debug)]
pub struct TrainOutcome {
    pub trajectory: Trajectory,
    pub stack: LayerStack,
    pub decision: Option<DecisionWeights>,
    pub abort: Option<CrestError>,
}

/// Ascends `Z` with `ΔU^(m) = β w^(m) (μ^(m))'` applied to all layers at
/// once, recording train/test accuracy and `Z` before every update and once
/// after the last.
pub fn train_linbp(
    stack: &LayerStack,
    train: &LabeledDataset,
    test: &LabeledDataset,
    params: &LinbpParams,
) -> Result<TrainOutcome> {
    if !(params.beta > 0.0 && params.beta.is_finite()) {
        return Err(CrestError::InvalidInput(format!("beta must be positive, got {}", params.beta)));
    }
    if params.refresh_interval == 0 {
        return Err(CrestError::InvalidInput("refresh interval must be at least 1".into()));
    }
    if test.dim() != train.dim() || test.num_classes() != train.num_classes() {
        return Err(CrestError::DimensionMismatch("train and test sets differ in shape".into()));
    }
    stack.check_input(train.features())?;

    let start = Instant::now();
    let mut stack = stack.clone();
    let mut trajectory = Trajectory::new();
    let mut decision: Option<LagrangianSolution> = None;

    let abort = loop {
        let iteration = trajectory.len();
        let step = (|| -> Result<Option<Vec<Matrix>>> {
            let trace = forward(&stack, train)?;
            if decision.is_none() || iteration.is_multiple_of(params.refresh_interval) {
                decision = Some(decision_layer(&trace, train, params.ridge)?);
            }
            let sol = decision.as_ref().expect("decision layer solved above");
            let train_pred = predict_all(&sol.weights, &trace.output)?;
            let test_out = stack.output(test.features())?;
            let test_pred = predict_all(&sol.weights, &test_out)?;
            trajectory.push(TrajectoryRow {
                iteration,
                train_accuracy: hit_rate(&train_pred, train.labels()),
                test_accuracy: hit_rate(&test_pred, test.labels()),
                objective: sol.z,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })?;
            if iteration == params.iterations {
                return Ok(None);
            }
            let ws = linbp_workspace_with(&stack, &trace, train, sol, params.residual)?;
            Ok(Some(linearized_gradient(&ws)))
        })();
        match step {
            Ok(Some(grads)) => {
                stack.apply_update(&grads, params.beta)?;
                if !stack.is_finite() {
                    break Some(CrestError::Diverged { iteration: iteration + 1 });
                }
            }
            Ok(None) => break None,
            Err(e) if e.is_numerical() || matches!(e, CrestError::InvalidInput(_)) => break Some(e),
            Err(e) => return Err(e),
        }
    };

    Ok(TrainOutcome {
        trajectory,
        stack,
        decision: decision.map(|s| s.weights),
        abort,
    })
}

fn hit_rate(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_problem(seed: u64, dim: usize, classes: usize, samples: usize) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Matrix::from_fn(dim, samples, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..samples).map(|j| j % classes).collect();
        LabeledDataset::new(features, labels, classes).unwrap()
    }

    fn cosine(a: &Matrix, b: &Matrix) -> f64 {
        a.dot(b) / (a.norm() * b.norm())
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let ds = small_problem(1, 3, 2, 5);
        let stack = LayerStack::new(3, vec![Matrix::zeros(4, 3), Matrix::zeros(2, 4)]).unwrap();
        let trace = forward(&stack, &ds).unwrap();
        assert!(trace.output.iter().all(|&v| v == 0.0));
        assert_eq!(trace.output.shape(), (2, 5));
    }

    #[test]
    fn scalar_layer() {
        let stack = LayerStack::new(1, vec![Matrix::from_element(1, 1, 1.0)]).unwrap();
        let out = stack.output(&Matrix::from_element(1, 1, 0.5)).unwrap();
        assert!((out[(0, 0)] - 0.46211715726000974).abs() < 1e-15);
    }

    #[test]
    fn shape_checks() {
        assert!(LayerStack::new(3, vec![Matrix::zeros(4, 2)]).is_err());
        assert!(LayerStack::new(3, vec![Matrix::zeros(4, 3), Matrix::zeros(2, 3)]).is_err());
        let stack = LayerStack::new(3, vec![Matrix::zeros(4, 3)]).unwrap();
        assert!(stack.output(&Matrix::zeros(2, 1)).is_err());
        assert_eq!(stack.output_dim(), 4);
        assert_eq!(LayerStack::empty(7).output_dim(), 7);
    }

    #[test]
    fn near_linear_stack_is_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = small_problem(3, 6, 2, 10);
        let stack = LayerStack::random(6, &[6, 5, 6, 4], 1e-6 * 6f64.sqrt(), &mut rng).unwrap();
        let out = stack.output(ds.features()).unwrap();
        let mut linear = ds.features().clone();
        for u in stack.layers() {
            linear = u * linear;
        }
        let rel = (&out - &linear).norm() / linear.norm();
        assert!(rel < 1e-9, "{rel}");
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = LayerStack::random(16, &[9, 3], 2.0, &mut rng).unwrap();
        assert!(stack.layers()[0].iter().all(|v| v.abs() < 0.5));
        assert!(stack.layers()[1].iter().all(|v| v.abs() < 2.0 / 3.0));
        assert!(LayerStack::random(16, &[0], 1.0, &mut rng).is_err());
    }

    #[test]
    fn orthonormal_outputs_give_sqrt_k() {
        // No layers, y = identity columns, one sample per class.
        let ds = LabeledDataset::new(Matrix::identity(4, 4), vec![0, 1, 2, 3], 4).unwrap();
        let trace = forward(&LayerStack::empty(4), &ds).unwrap();
        let z = objective_z(&trace, &ds, RidgePolicy::Auto).unwrap();
        assert!((z - 2.0).abs() < 1e-15);
    }

    #[test]
    fn z_ignores_rotation_after_last_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = small_problem(6, 5, 3, 30);
        let stack = LayerStack::random(5, &[6, 4], 1.0, &mut rng).unwrap();
        let trace = forward(&stack, &ds).unwrap();
        let q = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let mut rotated = trace.clone();
        rotated.output = &q * &trace.output;
        let a = objective_z(&trace, &ds, RidgePolicy::None).unwrap();
        let b = objective_z(&rotated, &ds, RidgePolicy::None).unwrap();
        assert!((a - b).abs() <= 1e-8 * a);
        // Same definition as the decision module.
        let out = ds.with_features(trace.output.clone()).unwrap();
        let gs = GramSystem::from_features(out.features(), RidgePolicy::None).unwrap();
        let sol = lagrangian_solve(&gs, &class_sums(&out), 1.0).unwrap();
        assert_eq!(sol.z, a);
    }

    /// Central differences of `Z`, step 1e-5.
    fn fd_grad(stack: &LayerStack, ds: &LabeledDataset, m: usize, r: usize, c: usize) -> f64 {
        let h = 1e-5;
        let eval = |delta: f64| {
            let mut layers = stack.layers().to_vec();
            layers[m][(r, c)] += delta;
            let s = LayerStack::new(stack.input_dim(), layers).unwrap();
            objective_z(&forward(&s, ds).unwrap(), ds, RidgePolicy::None).unwrap()
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ds = small_problem(8, 5, 3, 30);
        let stack = LayerStack::random(5, &[8, 8], 1.5, &mut rng).unwrap();
        let grads = exact_grad_z(&stack, &ds, RidgePolicy::None).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let m = rng.random_range(0..2);
            let r = rng.random_range(0..grads[m].nrows());
            let c = rng.random_range(0..grads[m].ncols());
            let fd = fd_grad(&stack, &ds, m, r, c);
            let g = grads[m][(r, c)];
            let err = if g.abs().max(fd.abs()) < 1e-8 {
                (g - fd).abs()
            } else {
                (g - fd).abs() / g.abs().max(fd.abs())
            };
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn perfect_fit_has_zero_gradients() {
        // One sample per class with square invertible layers: the fitted
        // indicators are exact, so both brackets vanish.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = small_problem(10, 3, 3, 3);
        let stack = LayerStack::random(3, &[3, 3], 1.0, &mut rng).unwrap();
        let exact = exact_grad_z(&stack, &ds, RidgePolicy::None).unwrap();
        let ws = linbp_workspace(
            &stack,
            &forward(&stack, &ds).unwrap(),
            &ds,
            RidgePolicy::None,
            ResidualForm::Exact,
        )
        .unwrap();
        let lin = linearized_gradient(&ws);
        for g in exact.iter().chain(&lin) {
            assert!(g.abs().max() < 1e-10, "{}", g.abs().max());
        }
        for mu in &ws.class_vectors {
            assert!(mu.abs().max() < 1e-10);
        }
    }

    #[test]
    fn normalized_residual_vanishes_when_z_matches_indicators() {
        // With Z = 1 the normalized decision values equal the fitted
        // indicators: one sample, one class.
        let ds = LabeledDataset::new(Matrix::from_column_slice(2, 1, &[0.3, -0.2]), vec![0], 1).unwrap();
        let stack = LayerStack::new(2, vec![Matrix::identity(2, 2) * 0.5]).unwrap();
        let trace = forward(&stack, &ds).unwrap();
        let ws = linbp_workspace(&stack, &trace, &ds, RidgePolicy::Auto, ResidualForm::Normalized).unwrap();
        assert!((ws.z_values[(0, 0)] - 1.0).abs() < 1e-9);
        assert!(ws.class_vectors[0].abs().max() < 1e-9);
        assert!(linearized_gradient(&ws)[0].abs().max() < 1e-9);
    }

    #[test]
    fn equivalent_weights_identity_and_scaled_layers() {
        let ds = small_problem(11, 4, 2, 12);
        let stack = LayerStack::new(4, vec![Matrix::identity(4, 4), Matrix::identity(4, 4)]).unwrap();
        let trace = forward(&stack, &ds).unwrap();
        let sol = decision_layer(&trace, &ds, RidgePolicy::Auto).unwrap();
        let ws = linbp_workspace_with(&stack, &trace, &ds, &sol, ResidualForm::Exact).unwrap();
        for w in &ws.equivalent_weights {
            assert_eq!(w, sol.weights.columns());
        }

        let stack = LayerStack::new(4, vec![Matrix::identity(4, 4), Matrix::identity(4, 4) * 2.0]).unwrap();
        let trace = forward(&stack, &ds).unwrap();
        let sol = decision_layer(&trace, &ds, RidgePolicy::Auto).unwrap();
        let ws = linbp_workspace_with(&stack, &trace, &ds, &sol, ResidualForm::Exact).unwrap();
        assert_eq!(&ws.equivalent_weights[1], sol.weights.columns());
        assert_eq!(ws.equivalent_weights[0], sol.weights.columns() * 2.0);
    }

    #[test]
    fn equivalent_weights_are_transpose_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ds = small_problem(13, 5, 3, 40);
        let stack = LayerStack::random(5, &[7, 6, 4], 1.0, &mut rng).unwrap();
        let trace = forward(&stack, &ds).unwrap();
        let sol = decision_layer(&trace, &ds, RidgePolicy::Auto).unwrap();
        let ws = linbp_workspace_with(&stack, &trace, &ds, &sol, ResidualForm::Exact).unwrap();
        let u = stack.layers();
        let w = sol.weights.columns();
        let direct0 = u[1].transpose() * u[2].transpose() * w;
        assert!((&ws.equivalent_weights[0] - direct0).abs().max() < 1e-12);
        assert!((&ws.equivalent_weights[1] - u[2].transpose() * w).abs().max() < 1e-12);
    }

    #[test]
    fn linearized_gradient_has_rank_at_most_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ds = small_problem(15, 12, 3, 60);
        let stack = LayerStack::random(12, &[10, 9], 1.0, &mut rng).unwrap();
        let trace = forward(&stack, &ds).unwrap();
        let ws = linbp_workspace(&stack, &trace, &ds, RidgePolicy::Auto, ResidualForm::Exact).unwrap();
        for g in linearized_gradient(&ws) {
            let mut sv: Vec<f64> = g.clone().svd(false, false).singular_values.iter().copied().collect();
            sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!(sv[..3].iter().all(|&s| s > 0.0));
            assert!(sv[3..].iter().all(|&s| s < 1e-10 * sv[0]), "{sv:?}");
        }
    }

    #[test]
    fn zero_class_vectors_give_zero_gradient() {
        let ws = LinBPWorkspace {
            equivalent_weights: vec![Matrix::from_element(3, 2, 1.0)],
            class_vectors: vec![Matrix::zeros(4, 2)],
            z_values: Matrix::zeros(2, 1),
        };
        let g = linearized_gradient(&ws);
        assert_eq!(g[0], Matrix::zeros(3, 4));
    }

    #[test]
    fn near_linear_gradients_agree() {
        // Bottleneck widths so Z genuinely depends on the layers.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for seed in 0..5 {
            let ds = small_problem(100 + seed, 8, 3, 30);
            let stack = LayerStack::random(8, &[5, 4], 1e-6 * 8f64.sqrt(), &mut rng).unwrap();
            let exact = exact_grad_z(&stack, &ds, RidgePolicy::None).unwrap();
            let ws = linbp_workspace(
                &stack,
                &forward(&stack, &ds).unwrap(),
                &ds,
                RidgePolicy::None,
                ResidualForm::Exact,
            )
            .unwrap();
            for (a, b) in exact.iter().zip(linearized_gradient(&ws)) {
                let cos = cosine(a, &b);
                assert!(cos > 0.99, "{cos}");
            }
        }
    }

    #[test]
    fn small_exact_step_increases_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ds = small_problem(18, 6, 3, 30);
        let stack = LayerStack::random(6, &[6, 5], 1.0, &mut rng).unwrap();
        let z0 = objective_z(&forward(&stack, &ds).unwrap(), &ds, RidgePolicy::None).unwrap();
        let grads = exact_grad_z(&stack, &ds, RidgePolicy::None).unwrap();
        let mut beta = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let mut s = stack.clone();
            s.apply_update(&grads, beta).unwrap();
            let z1 = objective_z(&forward(&s, &ds).unwrap(), &ds, RidgePolicy::None).unwrap();
            if z1 > z0 {
                improved = true;
                break;
            }
            beta *= 0.5;
        }
        assert!(improved);
    }

    #[test]
    fn zero_iterations_leave_stack_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let ds = generate_synthetic(1, 3, 6, 20, 0.5).unwrap();
        let stack = LayerStack::random(6, &[6], 1.0, &mut rng).unwrap();
        let params = LinbpParams {
            iterations: 0,
            ..LinbpParams::default()
        };
        let out = train_linbp(&stack, &ds, &ds, &params).unwrap();
        assert_eq!(out.trajectory.len(), 1);
        assert_eq!(out.trajectory.rows()[0].iteration, 0);
        assert_eq!(out.stack, stack);
        assert!(out.abort.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate_synthetic(2, 3, 6, 20, 0.8).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(20);
            let stack = LayerStack::random(6, &[6, 6], 1.0, &mut rng).unwrap();
            let params = LinbpParams {
                iterations: 15,
                beta: 1e-2,
                refresh_interval: 2,
                ..LinbpParams::default()
            };
            train_linbp(&stack, &ds, &ds, &params).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.stack, b.stack);
        let strip = |t: &Trajectory| -> Vec<(usize, u64, u64, u64)> {
            t.rows()
                .iter()
                .map(|r| (r.iteration, r.train_accuracy.to_bits(), r.test_accuracy.to_bits(), r.objective.to_bits()))
                .collect()
        };
        assert_eq!(strip(&a.trajectory), strip(&b.trajectory));
        assert_eq!(a.trajectory.len(), 16);
    }

    #[test]
    fn divergence_aborts_with_partial_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ds = generate_synthetic(3, 3, 6, 20, 0.8).unwrap();
        let stack = LayerStack::random(6, &[6, 6], 1.0, &mut rng).unwrap();
        let params = LinbpParams {
            iterations: 50,
            beta: 1e300,
            ..LinbpParams::default()
        };
        let out = train_linbp(&stack, &ds, &ds, &params).unwrap();
        assert!(out.abort.is_some());
        assert!(out.trajectory.len() < 51);
        assert!(!out.trajectory.is_empty());
    }

    #[test]
    fn bad_parameters() {
        let ds = generate_synthetic(3, 3, 6, 5, 0.8).unwrap();
        let stack = LayerStack::empty(6);
        let p = LinbpParams {
            beta: 0.0,
            ..LinbpParams::default()
        };
        assert!(train_linbp(&stack, &ds, &ds, &p).is_err());
        let p = LinbpParams {
            refresh_interval: 0,
            ..LinbpParams::default()
        };
        assert!(train_linbp(&stack, &ds, &ds, &p).is_err());
    }
}
