//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key has a default; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::gram::RidgePolicy;
use crate::network::ResidualForm;
use crate::{CrestError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Computed decision weights behind 0..L frozen random layers.
    Sweep,
    /// Plain gradient descent on the decision layer over a range of rates.
    Gd,
    /// Preconditioned descent on the decision layer.
    ModifiedGd,
    /// Linearized-backpropagation training of the pre-decision stack.
    Train,
    /// Gram traces, trace bound and learnability verdict.
    Diagnose,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Sweep,
        Scenario::Gd,
        Scenario::ModifiedGd,
        Scenario::Train,
        Scenario::Diagnose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Sweep => "sweep-random-layers",
            Scenario::Gd => "gd-decision",
            Scenario::ModifiedGd => "modified-gd",
            Scenario::Train => "train-linbp",
            Scenario::Diagnose => "diagnose",
        }
    }

    /// Pre-decision widths used when `layers` is not set.
    pub fn default_layers(self) -> Vec<usize> {
        match self {
            Scenario::Sweep => vec![100; 6],
            Scenario::Train => vec![100; 8],
            Scenario::Gd | Scenario::ModifiedGd | Scenario::Diagnose => vec![100],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "sweep" | "sweep-random-layers" => Ok(Scenario::Sweep),
            "gd" | "gd-decision" => Ok(Scenario::Gd),
            "modified-gd" => Ok(Scenario::ModifiedGd),
            "train" | "train-linbp" => Ok(Scenario::Train),
            "diagnose" => Ok(Scenario::Diagnose),
            other => Err(format!(
                "unknown scenario `{other}`; expected one of sweep-random-layers, gd-decision, modified-gd, train-linbp, diagnose"
            )),
        }
    }
}

/// Rates for the `gd-decision` scenario; [`DEFAULT_ALPHAS`] unless set.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaGrid {
    /// Rates placed at fixed multiples of `1 / λmax` so that every regime is
    /// visited: `αλmax` in [`AUTO_ALPHA_PRODUCTS`].
    Auto,
    Explicit(Vec<f64>),
}

pub const AUTO_ALPHA_PRODUCTS: [f64; 6] = [2.5, 1.5, 0.9, 0.25, 0.025, 0.0025];

/// Logarithmic grid used when `alphas` is not set.
pub const DEFAULT_ALPHAS: [f64; 5] = [1e-9, 1e-8, 1e-7, 1e-6, 1e-5];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Dataset CSV; synthetic data is generated when absent.
    pub data: Option<PathBuf>,
    pub num_classes: Option<usize>,
    pub synthetic_classes: usize,
    pub synthetic_dim: usize,
    pub synthetic_per_class: usize,
    pub synthetic_spread: f64,
    pub seed: u64,
    /// `None` means [`Scenario::default_layers`].
    pub layers: Option<Vec<usize>>,
    /// Random layers are uniform on `±init_gain / sqrt(fan_in)`.
    pub init_gain: f64,
    /// Rate of the `modified-gd` scenario.
    pub alpha: f64,
    pub alphas: AlphaGrid,
    pub beta: f64,
    pub sigma: f64,
    pub iterations: usize,
    pub refresh_interval: usize,
    pub ridge: RidgePolicy,
    pub residual: ResidualForm,
    pub test_fraction: f64,
    pub out: PathBuf,
    /// Whether `diagnose` also runs a full eigendecomposition.
    pub exact_eigen: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Train,
            data: None,
            num_classes: None,
            synthetic_classes: 10,
            synthetic_dim: 100,
            synthetic_per_class: 450,
            synthetic_spread: 0.6,
            seed: 0,
            layers: None,
            init_gain: 1.0,
            alpha: 0.5,
            alphas: AlphaGrid::Explicit(DEFAULT_ALPHAS.to_vec()),
            beta: 1e-3,
            sigma: 1.0,
            iterations: 400,
            refresh_interval: 1,
            ridge: RidgePolicy::Auto,
            residual: ResidualForm::Exact,
            test_fraction: 1.0 / 3.0,
            out: PathBuf::from("out"),
            exact_eigen: true,
        }
    }
}

pub const KEYS: [&str; 21] = [
    "scenario",
    "data",
    "num_classes",
    "synthetic_classes",
    "synthetic_dim",
    "synthetic_per_class",
    "synthetic_spread",
    "seed",
    "layers",
    "init_gain",
    "alpha",
    "alphas",
    "beta",
    "sigma",
    "iterations",
    "refresh_interval",
    "ridge",
    "residual",
    "test_fraction",
    "out",
    "exact_eigen",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CrestError::Config {
                    key: format!("line {}", idx + 1),
                    message: format!("expected `key = value`, found `{line}`"),
                });
            };
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CrestError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |message: String| CrestError::Config {
            key: key.to_string(),
            message,
        };
        match key {
            "scenario" => self.scenario = value.parse().map_err(bad)?,
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "num_classes" => {
                self.num_classes = match value {
                    "" | "auto" => None,
                    v => Some(positive(v).map_err(bad)?),
                }
            }
            "synthetic_classes" => self.synthetic_classes = positive(value).map_err(bad)?,
            "synthetic_dim" => self.synthetic_dim = positive(value).map_err(bad)?,
            "synthetic_per_class" => self.synthetic_per_class = positive(value).map_err(bad)?,
            "synthetic_spread" => self.synthetic_spread = positive_real(value).map_err(bad)?,
            "seed" => self.seed = value.parse().map_err(|_| bad(format!("`{value}` is not a non-negative integer")))?,
            "layers" => self.layers = Some(parse_widths(value).map_err(bad)?),
            "init_gain" => self.init_gain = positive_real(value).map_err(bad)?,
            "alpha" => self.alpha = positive_real(value).map_err(bad)?,
            "alphas" => {
                self.alphas = if value == "auto" {
                    AlphaGrid::Auto
                } else {
                    let list = value
                        .split(',')
                        .map(|v| positive_real(v.trim()))
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(bad)?;
                    if list.is_empty() {
                        return Err(bad("empty rate list".into()));
                    }
                    AlphaGrid::Explicit(list)
                }
            }
            "beta" => self.beta = positive_real(value).map_err(bad)?,
            "sigma" => self.sigma = positive_real(value).map_err(bad)?,
            "iterations" => {
                self.iterations = value
                    .parse()
                    .map_err(|_| bad(format!("`{value}` is not a non-negative integer")))?
            }
            "refresh_interval" => self.refresh_interval = positive(value).map_err(bad)?,
            "ridge" => self.ridge = value.parse().map_err(bad)?,
            "residual" => self.residual = value.parse().map_err(bad)?,
            "test_fraction" => self.test_fraction = real(value).map_err(bad)?,
            "out" => {
                if value.is_empty() {
                    return Err(bad("output directory must not be empty".into()));
                }
                self.out = PathBuf::from(value)
            }
            "exact_eigen" => {
                self.exact_eigen = match value {
                    "true" | "yes" | "1" => true,
                    "false" | "no" | "0" => false,
                    v => return Err(bad(format!("`{v}` is not a boolean"))),
                }
            }
            _ => {
                return Err(CrestError::Config {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Cross-field checks that a single `set` cannot make.
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CrestError::Config {
                key: "test_fraction".into(),
                message: format!("must lie strictly between 0 and 1, got {}", self.test_fraction),
            });
        }
        if self.scenario == Scenario::Sweep && self.layers().is_empty() {
            return Err(CrestError::Config {
                key: "layers".into(),
                message: "the sweep needs at least one layer".into(),
            });
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<usize> {
        self.layers.clone().unwrap_or_else(|| self.scenario.default_layers())
    }

    /// The configuration as parseable text, one line per key.
    pub fn to_text(&self) -> String {
        let widths = self.layers();
        let layers = if widths.is_empty() {
            "none".to_string()
        } else {
            join(widths.iter())
        };
        let alphas = match &self.alphas {
            AlphaGrid::Auto => "auto".to_string(),
            AlphaGrid::Explicit(list) => join(list.iter().map(|a| format!("{a:e}"))),
        };
        let lines = [
            ("scenario", self.scenario.to_string()),
            ("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("num_classes", self.num_classes.map(|k| k.to_string()).unwrap_or_else(|| "auto".into())),
            ("synthetic_classes", self.synthetic_classes.to_string()),
            ("synthetic_dim", self.synthetic_dim.to_string()),
            ("synthetic_per_class", self.synthetic_per_class.to_string()),
            ("synthetic_spread", format!("{:e}", self.synthetic_spread)),
            ("seed", self.seed.to_string()),
            ("layers", layers),
            ("init_gain", format!("{:e}", self.init_gain)),
            ("alpha", format!("{:e}", self.alpha)),
            ("alphas", alphas),
            ("beta", format!("{:e}", self.beta)),
            ("sigma", format!("{:e}", self.sigma)),
            ("iterations", self.iterations.to_string()),
            ("refresh_interval", self.refresh_interval.to_string()),
            ("ridge", self.ridge.to_string()),
            ("residual", self.residual.to_string()),
            ("test_fraction", format!("{:e}", self.test_fraction)),
            ("out", self.out.display().to_string()),
            ("exact_eigen", self.exact_eigen.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn join<T: fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

fn positive(v: &str) -> std::result::Result<usize, String> {
    match v.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("`{v}` is not a positive integer")),
    }
}

fn real(v: &str) -> std::result::Result<f64, String> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("`{v}` is not a finite number")),
    }
}

fn positive_real(v: &str) -> std::result::Result<f64, String> {
    match real(v)? {
        x if x > 0.0 => Ok(x),
        _ => Err(format!("`{v}` is not positive")),
    }
}

fn parse_widths(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|w| positive(w.trim())).collect()
}
