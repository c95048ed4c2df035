//! Experiment scenarios, their artifacts and exit status.
//!
//! Every scenario writes into `config.out`:
//!
//! | scenario              | artifacts                                                |
//! |-----------------------|----------------------------------------------------------|
//! | `sweep-random-layers` | `sweep.csv`, `trajectory.csv` (iteration = layer count)  |
//! | `gd-decision`         | `trajectory_alpha<k>.csv` per rate                       |
//! | `modified-gd`         | `trajectory.csv`                                         |
//! | `train-linbp`         | `trajectory.csv`, `model.txt`                            |
//! | `diagnose`            | report only                                              |
//!
//! plus `config.txt` (the effective configuration) and `report.txt`.
//! All randomness derives from `config.seed`.

pub mod config;
pub mod model;
pub mod trajectory;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{class_sums, generate_synthetic, load_csv_with_classes, split, LabeledDataset};
use crate::decision::{accuracy, computed_weights, lagrangian_solve, loss_and_grad, DecisionWeights, LossKind};
use crate::dynamics::{classify_regime, equilibrium, gd_step, modified_gd_step, GDState};
use crate::gram::{build_gram, learnability_verdict, spectral_summary, GramSystem, SpectralMethod};
use crate::network::{train_linbp, LayerStack, LinbpParams};
use crate::{CrestError, Matrix, Result};

use config::{AlphaGrid, ExperimentConfig, Scenario, AUTO_ALPHA_PRODUCTS};
use model::save_model;
use trajectory::{emit_trajectory, fmt_f64, Trajectory, TrajectoryRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_LAYERS: u64 = 3;
const STREAM_INIT: u64 = 4;

/// What a finished run produced.
#[derive(Debug)]
pub struct RunSummary {
    pub scenario: Scenario,
    pub artifacts: Vec<PathBuf>,
    pub report: String,
    /// Set when training stopped on a numerical failure; the partial
    /// trajectory is still on disk.
    pub abort: Option<CrestError>,
}

pub fn exit_code(result: &Result<RunSummary>) -> i32 {
    match result {
        Ok(summary) if summary.abort.is_none() => EXIT_OK,
        Ok(_) => EXIT_NUMERICAL,
        Err(CrestError::Config { .. }) => EXIT_CONFIG,
        Err(e) if e.is_numerical() => EXIT_NUMERICAL,
        Err(_) => EXIT_FAILURE,
    }
}

/// An independent 64-bit seed for one consumer of randomness.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// The configured dataset, before splitting.
pub fn load_dataset(config: &ExperimentConfig) -> Result<LabeledDataset> {
    match &config.data {
        Some(path) => load_csv_with_classes(path, config.num_classes),
        None => {
            let ds = generate_synthetic(
                stream_seed(config.seed, STREAM_DATA),
                config.synthetic_classes,
                config.synthetic_dim,
                config.synthetic_per_class,
                config.synthetic_spread,
            )?;
            match config.num_classes {
                Some(k) => ds.with_num_classes(k),
                None => Ok(ds),
            }
        }
    }
}

/// Train and test parts of the configured dataset.
pub fn load_split(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let ds = load_dataset(config)?;
    split(&ds, stream_seed(config.seed, STREAM_SPLIT), config.test_fraction)
}

/// The seeded random pre-decision stack for this configuration.
pub fn random_stack(config: &ExperimentConfig, input_dim: usize) -> Result<LayerStack> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, STREAM_LAYERS));
    LayerStack::random(input_dim, &config.layers(), config.init_gain, &mut rng)
}

pub fn run(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    std::fs::create_dir_all(&config.out).map_err(|e| CrestError::io(&config.out, e))?;
    let mut run = Run {
        out: config.out.clone(),
        artifacts: Vec::new(),
        report: Report::new(config.scenario),
    };
    run.write("config.txt", &config.to_text())?;

    let abort = match config.scenario {
        Scenario::Sweep => sweep(config, &mut run).map(|_| None),
        Scenario::Gd => gd(config, &mut run).map(|_| None),
        Scenario::ModifiedGd => modified_gd(config, &mut run).map(|_| None),
        Scenario::Train => train(config, &mut run),
        Scenario::Diagnose => diagnose(config, &mut run).map(|_| None),
    }?;
    if let Some(e) = &abort {
        run.report.line("abort", e);
    }
    let report = run.report.text.clone();
    run.write("report.txt", &report)?;
    Ok(RunSummary {
        scenario: config.scenario,
        artifacts: run.artifacts,
        report,
        abort,
    })
}

struct Run {
    out: PathBuf,
    artifacts: Vec<PathBuf>,
    report: Report,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        let path = self.out.join(name);
        self.artifacts.push(path.clone());
        path
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(|e| CrestError::io(&path, e))
    }

    fn trajectory(&mut self, name: &str, traj: &Trajectory) -> Result<()> {
        let path = self.path(name);
        emit_trajectory(traj, &path)
    }
}

struct Report {
    text: String,
}

impl Report {
    fn new(scenario: Scenario) -> Self {
        Self {
            text: format!("scenario: {scenario}\n"),
        }
    }

    fn line(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.text, "{key}: {value}");
    }
}

fn through(stack: &LayerStack, ds: &LabeledDataset) -> Result<LabeledDataset> {
    ds.with_features(stack.output(ds.features())?)
}

fn describe_data(config: &ExperimentConfig, report: &mut Report, train: &LabeledDataset, test: &LabeledDataset) {
    match &config.data {
        Some(p) => report.line("data", p.display()),
        None => report.line("data", "synthetic"),
    }
    report.line("dim", train.dim());
    report.line("classes", train.num_classes());
    report.line("train_samples", train.len());
    report.line("test_samples", test.len());
}

fn sweep(config: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let (train, test) = load_split(config)?;
    describe_data(config, &mut run.report, &train, &test);
    let stack = random_stack(config, train.dim())?;

    let mut table = String::from("layers,train_acc,test_acc\n");
    let mut traj = Trajectory::new();
    let start = Instant::now();
    for depth in 0..=stack.num_layers() {
        let prefix = stack.truncated(depth);
        let tr = through(&prefix, &train)?;
        let te = through(&prefix, &test)?;
        let gs = build_gram(&tr, config.ridge)?;
        let ms = class_sums(&tr);
        let w = computed_weights(&gs, &ms)?;
        let z = lagrangian_solve(&gs, &ms, config.sigma)?.z;
        let (a_tr, a_te) = (accuracy(&w, &tr)?, accuracy(&w, &te)?);
        let _ = writeln!(table, "{depth},{},{}", fmt_f64(a_tr), fmt_f64(a_te));
        traj.push(TrajectoryRow {
            iteration: depth,
            train_accuracy: a_tr,
            test_accuracy: a_te,
            objective: z,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })?;
        run.report.line(
            &format!("layers_{depth}"),
            format!("train {a_tr:.4} test {a_te:.4} ridge {:e}", gs.ridge()),
        );
    }
    run.write("sweep.csv", &table)?;
    run.trajectory("trajectory.csv", &traj)
}

/// Decision-layer problem shared by both descent scenarios: features behind
/// the frozen random stack, and seeded random starting weights.
struct DescentSetup {
    train: LabeledDataset,
    test: LabeledDataset,
    gs: GramSystem,
    ms: crate::dataset::ClassSums,
    w0: DecisionWeights,
}

fn descent_setup(config: &ExperimentConfig, report: &mut Report) -> Result<DescentSetup> {
    let (train, test) = load_split(config)?;
    describe_data(config, report, &train, &test);
    let stack = random_stack(config, train.dim())?;
    report.line("frozen_layers", stack.num_layers());
    let train = through(&stack, &train)?;
    let test = through(&stack, &test)?;
    let gs = build_gram(&train, config.ridge)?;
    let ms = class_sums(&train);

    let dim = train.dim();
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, STREAM_INIT));
    let w0 = Matrix::from_fn(dim, train.num_classes(), |_, _| rng.random_range(-bound..bound));
    let w0 = DecisionWeights::new(w0)?;

    let w_star = computed_weights(&gs, &ms)?;
    report.line("ridge", format!("{:e}", gs.ridge()));
    report.line("computed_train_acc", format!("{:.6}", accuracy(&w_star, &train)?));
    report.line("computed_test_acc", format!("{:.6}", accuracy(&w_star, &test)?));
    Ok(DescentSetup {
        train,
        test,
        gs,
        ms,
        w0,
    })
}

/// Runs `step` from `w0` and records every iterate until divergence.
/// Returns the trajectory and the iteration at which weights stopped being
/// finite, if they did.
fn descend(
    setup: &DescentSetup,
    alpha: f64,
    iterations: usize,
    step: impl Fn(&GDState, &GramSystem, &crate::dataset::ClassSums) -> Result<GDState>,
) -> Result<(Trajectory, GDState, Option<usize>)> {
    let start = Instant::now();
    let mut traj = Trajectory::new();
    let mut state = GDState::new(setup.w0.clone(), alpha)?;
    loop {
        if state.diverged {
            return Ok((traj, state.clone(), Some(state.iteration)));
        }
        let (loss, _) = loss_and_grad(LossKind::Quadratic, &state.weights, &setup.train)?;
        traj.push(TrajectoryRow {
            iteration: state.iteration,
            train_accuracy: accuracy(&state.weights, &setup.train)?,
            test_accuracy: accuracy(&state.weights, &setup.test)?,
            objective: loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })?;
        if state.iteration == iterations {
            return Ok((traj, state, None));
        }
        state = step(&state, &setup.gs, &setup.ms)?;
    }
}

fn gd(config: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let setup = descent_setup(config, &mut run.report)?;
    let ss = spectral_summary(&setup.gs, SpectralMethod::Exact)?;
    let lmax = ss.lambda_max.expect("exact summary has extremes");
    run.report.line("lambda_max", format!("{lmax:e}"));
    run.report.line("lambda_min", format!("{:e}", ss.lambda_min.expect("exact summary has extremes")));
    run.report.line("trace_bound", format!("{:e}", ss.trace_bound));
    run.report.line("verdict", learnability_verdict(&ss).learnability);

    let alphas: Vec<f64> = match &config.alphas {
        AlphaGrid::Explicit(list) => list.clone(),
        AlphaGrid::Auto => {
            if !(lmax > 0.0) {
                return Err(CrestError::SingularGram {
                    trace_gram: setup.gs.trace_gram(),
                });
            }
            AUTO_ALPHA_PRODUCTS.iter().map(|p| p / lmax).collect()
        }
    };
    for (k, &alpha) in alphas.iter().enumerate() {
        let regime = classify_regime(&ss, alpha)?;
        let (traj, _, diverged_at) = descend(&setup, alpha, config.iterations, gd_step)?;
        let name = format!("trajectory_alpha{k}.csv");
        run.trajectory(&name, &traj)?;
        let last = traj.last().expect("iteration 0 is always recorded");
        let mut line = format!(
            "alpha {alpha:e} alpha_lambda_max {:e} alpha_lambda_min {:e} regime {} final_train {:.4} final_test {:.4} final_loss {:e} file {name}",
            regime.alpha_lambda_max, regime.alpha_lambda_min, regime.regime, last.train_accuracy, last.test_accuracy, last.objective
        );
        if let Some(n) = diverged_at {
            let _ = write!(line, " diverged_at {n}");
        }
        run.report.line(&format!("rate_{k}"), line);
    }
    Ok(())
}

fn modified_gd(config: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let setup = descent_setup(config, &mut run.report)?;
    let (traj, state, diverged_at) = descend(&setup, config.alpha, config.iterations, modified_gd_step)?;
    run.trajectory("trajectory.csv", &traj)?;

    let fixed = equilibrium(&setup.gs, &setup.ms);
    let initial = (setup.w0.columns() - &fixed).norm();
    let last = traj.last().expect("iteration 0 is always recorded");
    run.report.line("alpha", format!("{:e}", config.alpha));
    run.report.line("final_train_acc", format!("{:.6}", last.train_accuracy));
    run.report.line("final_test_acc", format!("{:.6}", last.test_accuracy));
    run.report.line("final_loss", format!("{:e}", last.objective));
    if initial > 0.0 {
        let ratio = (state.weights.columns() - &fixed).norm() / initial;
        run.report.line("error_ratio", format!("{ratio:e}"));
        run.report.line(
            "error_ratio_predicted",
            format!("{:e}", (1.0 - config.alpha).abs().powi(state.iteration as i32)),
        );
    }
    if let Some(n) = diverged_at {
        run.report.line("diverged_at", n);
    }
    Ok(())
}

fn train(config: &ExperimentConfig, run: &mut Run) -> Result<Option<CrestError>> {
    let (train, test) = load_split(config)?;
    describe_data(config, &mut run.report, &train, &test);
    let stack = random_stack(config, train.dim())?;
    run.report.line("layers", format!("{:?}", config.layers()));
    let params = LinbpParams {
        beta: config.beta,
        iterations: config.iterations,
        refresh_interval: config.refresh_interval,
        ridge: config.ridge,
        residual: config.residual,
    };
    let outcome = train_linbp(&stack, &train, &test, &params)?;
    run.trajectory("trajectory.csv", &outcome.trajectory)?;

    let rows = outcome.trajectory.rows();
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        run.report.line("iterations_recorded", rows.len());
        run.report.line("initial_train_acc", format!("{:.6}", first.train_accuracy));
        run.report.line("initial_test_acc", format!("{:.6}", first.test_accuracy));
        run.report.line("final_train_acc", format!("{:.6}", last.train_accuracy));
        run.report.line("final_test_acc", format!("{:.6}", last.test_accuracy));
        run.report.line("initial_z", format!("{:e}", first.objective));
        run.report.line("final_z", format!("{:e}", last.objective));
    }
    match (&outcome.abort, &outcome.decision) {
        (None, Some(w)) => {
            let path = run.path("model.txt");
            save_model(&outcome.stack, w, path)?;
        }
        _ => run.report.line("model", "not written"),
    }
    Ok(outcome.abort)
}

fn diagnose(config: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let ds = load_dataset(config)?;
    run.report.line("samples", ds.len());
    let stack = random_stack(config, ds.dim())?;
    run.report.line("frozen_layers", stack.num_layers());
    let features = through(&stack, &ds)?;
    let gs = build_gram(&features, config.ridge)?;
    let method = if config.exact_eigen {
        SpectralMethod::Exact
    } else {
        SpectralMethod::TraceOnly
    };
    let ss = spectral_summary(&gs, method)?;
    let verdict = learnability_verdict(&ss);
    let r = &mut run.report;
    r.line("dim", gs.dim());
    r.line("ridge", format!("{:e}", gs.ridge()));
    r.line("trace_gram", format!("{:e}", gs.trace_gram()));
    r.line("trace_rho", format!("{:e}", gs.trace_rho()));
    r.line("trace_bound", format!("{:e}", ss.trace_bound));
    if let (Some(lmax), Some(lmin), Some(ratio)) = (ss.lambda_max, ss.lambda_min, ss.ratio) {
        r.line("lambda_max", format!("{lmax:e}"));
        r.line("lambda_min", format!("{lmin:e}"));
        r.line("eigen_ratio", format!("{ratio:e}"));
    }
    r.line("verdict", verdict.learnability);
    r.line("rationale", verdict.rationale);
    Ok(())
}

/// Reads `key: value` lines back out of a report.
pub fn report_value<'a>(report: &'a str, key: &str) -> Option<&'a str> {
    report.lines().find_map(|l| {
        let (k, v) = l.split_once(": ")?;
        (k == key).then_some(v)
    })
}

/// Output directory convenience for callers that only know a base path.
pub fn with_out(config: &ExperimentConfig, out: impl AsRef<Path>) -> ExperimentConfig {
    ExperimentConfig {
        out: out.as_ref().to_path_buf(),
        ..config.clone()
    }
}
