//! Per-iteration learning curves and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::{CrestError, Result};

pub const TRAJECTORY_HEADER: &str = "iteration,train_acc,test_acc,objective,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// `Z` for pre-decision training, the batch loss for decision-layer descent.
    pub objective: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a row. Iterations must be strictly increasing from 0.
    pub fn push(&mut self, row: TrajectoryRow) -> Result<()> {
        let ok = match self.rows.last() {
            None => row.iteration == 0,
            Some(prev) => row.iteration > prev.iteration,
        };
        if !ok {
            return Err(CrestError::InvalidInput(format!(
                "trajectory iteration {} does not follow {:?}",
                row.iteration,
                self.rows.last().map(|r| r.iteration)
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[TrajectoryRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }

    /// CSV text; reals carry 17 significant digits so they parse back to the
    /// same bits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(TRAJECTORY_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.iteration,
                fmt_f64(r.train_accuracy),
                fmt_f64(r.test_accuracy),
                fmt_f64(r.objective),
                fmt_f64(r.wall_ms)
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == TRAJECTORY_HEADER => {}
            _ => {
                return Err(CrestError::Parse {
                    row: 1,
                    message: format!("expected header `{TRAJECTORY_HEADER}`"),
                })
            }
        }
        let mut traj = Trajectory::new();
        for (idx, line) in lines.enumerate() {
            let row = idx + 2;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(CrestError::Parse {
                    row,
                    message: format!("expected 5 fields, found {}", fields.len()),
                });
            }
            let real = |i: usize| {
                fields[i].parse::<f64>().map_err(|_| CrestError::Parse {
                    row,
                    message: format!("`{}` is not a number", fields[i]),
                })
            };
            let iteration = fields[0].parse::<usize>().map_err(|_| CrestError::Parse {
                row,
                message: format!("`{}` is not an iteration count", fields[0]),
            })?;
            traj.push(TrajectoryRow {
                iteration,
                train_accuracy: real(1)?,
                test_accuracy: real(2)?,
                objective: real(3)?,
                wall_ms: real(4)?,
            })
            .map_err(|e| CrestError::Parse {
                row,
                message: e.to_string(),
            })?;
        }
        Ok(traj)
    }
}

/// 17 significant digits in scientific notation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn emit_trajectory(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, traj.to_csv()).map_err(|e| CrestError::io(path, e))
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CrestError::io(path, e))?;
    Trajectory::from_csv(&text)
}
