//! Text model files.
//!
//! ```text
//! CREST-MODEL v1
//! layers <L>
//! <rows> <cols>        # layer 1, then one line per row
//! ...
//! <rows> <cols>        # decision weights, N x K
//! ...
//! ```
//!
//! Values are written with 17 significant digits, so loading restores the
//! saved bits.

use std::fmt::Write as _;
use std::path::Path;

use crate::decision::DecisionWeights;
use crate::network::LayerStack;
use crate::runner::trajectory::fmt_f64;
use crate::{CrestError, Matrix, Result};

pub const MODEL_HEADER: &str = "CREST-MODEL v1";

pub fn model_to_text(stack: &LayerStack, w: &DecisionWeights) -> Result<String> {
    if w.dim() != stack.output_dim() {
        return Err(CrestError::DimensionMismatch(format!(
            "decision weights have {} rows but the stack emits {} features",
            w.dim(),
            stack.output_dim()
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_HEADER}");
    let _ = writeln!(out, "layers {}", stack.num_layers());
    for m in stack.layers().iter().chain(std::iter::once(w.columns())) {
        write_matrix(&mut out, m);
    }
    Ok(out)
}

fn write_matrix(out: &mut String, m: &Matrix) {
    let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| fmt_f64(m[(r, c)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

pub fn model_from_text(text: &str) -> Result<(LayerStack, DecisionWeights)> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let err = |section: &str, message: String| CrestError::Model {
        section: section.to_string(),
        message,
    };

    match lines.next() {
        Some(MODEL_HEADER) => {}
        Some(other) => return Err(err("header", format!("expected `{MODEL_HEADER}`, found `{other}`"))),
        None => return Err(err("header", "empty file".into())),
    }
    let count = lines
        .next()
        .and_then(|l| l.strip_prefix("layers "))
        .and_then(|n| n.trim().parse::<usize>().ok())
        .ok_or_else(|| err("header", "expected `layers <count>`".into()))?;

    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let section = format!("layer {}", i + 1);
        layers.push(read_matrix(&mut lines, &section)?);
    }
    let w = read_matrix(&mut lines, "decision weights")?;
    if let Some(extra) = lines.next() {
        return Err(err("trailer", format!("unexpected content `{extra}`")));
    }

    let input_dim = layers.first().map_or(w.nrows(), |u| u.ncols());
    let stack = LayerStack::new(input_dim, layers).map_err(|e| err("layers", e.to_string()))?;
    if stack.output_dim() != w.nrows() {
        return Err(err(
            "decision weights",
            format!("{} rows but the last layer emits {} features", w.nrows(), stack.output_dim()),
        ));
    }
    let w = DecisionWeights::new(w).map_err(|e| err("decision weights", e.to_string()))?;
    Ok((stack, w))
}

fn read_matrix<'a>(lines: &mut impl Iterator<Item = &'a str>, section: &str) -> Result<Matrix> {
    let err = |message: String| CrestError::Model {
        section: section.to_string(),
        message,
    };
    let shape = lines.next().ok_or_else(|| err("missing shape line".into()))?;
    let dims: Vec<usize> = shape
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| err(format!("bad shape line `{shape}`")))?;
    let [rows, cols] = dims[..] else {
        return Err(err(format!("bad shape line `{shape}`")));
    };
    if rows == 0 || cols == 0 {
        return Err(err(format!("empty shape {rows}x{cols}")));
    }
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| err(format!("truncated after {r} of {rows} rows")))?;
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != cols {
            return Err(err(format!("row {} has {} values, expected {cols}", r + 1, values.len())));
        }
        for (c, v) in values.iter().enumerate() {
            m[(r, c)] = v
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("row {}: `{v}` is not a finite number", r + 1)))?;
        }
    }
    Ok(m)
}

pub fn save_model(stack: &LayerStack, w: &DecisionWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = model_to_text(stack, w)?;
    std::fs::write(path, text).map_err(|e| CrestError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(LayerStack, DecisionWeights)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CrestError::io(path, e))?;
    model_from_text(&text)
}
