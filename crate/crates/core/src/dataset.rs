//! Labeled feature datasets and class-sum vectors.
//!
//! Samples are stored one per column: a dataset with `N` features and `|X|`
//! samples holds an `N x |X|` matrix, which is exactly the `Y` whose Gram
//! matrix `YY'` the rest of the crate works with.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{CrestError, Matrix, Result};

/// Feature columns with class labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(CrestError::InvalidInput("number of classes must be positive".into()));
        }
        if labels.is_empty() {
            return Err(CrestError::InvalidInput("dataset has no samples".into()));
        }
        if features.ncols() != labels.len() {
            return Err(CrestError::DimensionMismatch(format!(
                "{} feature columns but {} labels",
                features.ncols(),
                labels.len()
            )));
        }
        if let Some((idx, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(CrestError::InvalidInput(format!(
                "sample {idx} has label {label}, outside [0, {num_classes})"
            )));
        }
        if let Some(col) = (0..features.ncols()).find(|&j| features.column(j).iter().any(|v| !v.is_finite())) {
            return Err(CrestError::InvalidInput(format!("sample {col} has a non-finite feature")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    /// `N x |X|`, one column per sample.
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Feature dimension `N`.
    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same labels over a different feature representation, e.g. the output
    /// of a pre-decision network.
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        Self::new(features, self.labels.clone(), self.num_classes)
    }

    /// Declares more classes than the labels use; the extra classes are empty.
    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        Self::new(self.features, self.labels, num_classes)
    }

    /// The `K x |X|` class-indicator matrix, entry `(i, x)` is `δ_{i c(x)}`.
    pub fn indicators(&self) -> Matrix {
        let mut t = Matrix::zeros(self.num_classes, self.len());
        for (j, &label) in self.labels.iter().enumerate() {
            t[(label, j)] = 1.0;
        }
        t
    }

    /// Samples at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select_columns(indices.iter());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.num_classes)
    }
}

/// Reads `label,f1,...,fN` rows (no header). `K` becomes `max label + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    load_csv_with_classes(path, None)
}

/// Like [`load_csv`], with an optional declared class count that must cover
/// every label in the file.
pub fn load_csv_with_classes(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CrestError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;

    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| CrestError::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(CrestError::Parse {
                row,
                message: "expected a label followed by at least one feature".into(),
            });
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(CrestError::Parse {
                    row,
                    message: format!("{} fields, previous rows have {w}", record.len()),
                })
            }
            Some(_) => {}
        }

        let label_field = &record[0];
        let label: i64 = label_field.parse().map_err(|_| CrestError::Parse {
            row,
            message: format!("label `{label_field}` is not an integer"),
        })?;
        if label < 0 {
            return Err(CrestError::Parse {
                row,
                message: format!("negative label {label}"),
            });
        }
        labels.push(label as usize);

        for (col, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| CrestError::Parse {
                row,
                message: format!("feature {col} `{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(CrestError::Parse {
                    row,
                    message: format!("feature {col} is not finite"),
                });
            }
            values.push(v);
        }
    }

    let Some(width) = width else {
        return Err(CrestError::InvalidInput(format!("{} contains no samples", path.display())));
    };
    let observed = labels.iter().max().map_or(0, |m| m + 1);
    let k = match num_classes {
        Some(k) if k < observed => {
            return Err(CrestError::InvalidInput(format!(
                "declared {k} classes but the file uses label {}",
                observed - 1
            )))
        }
        Some(k) => k,
        None => observed,
    };
    // Rows of the file are samples, i.e. columns of the feature matrix.
    let features = Matrix::from_vec(width - 1, labels.len(), values);
    LabeledDataset::new(features, labels, k)
}

/// `K` isotropic Gaussian clusters around random unit-norm means.
///
/// Samples are laid out class by class. The output depends only on the
/// arguments.
pub fn generate_synthetic(
    seed: u64,
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(CrestError::InvalidInput(
            "synthetic data needs positive class count, dimension and samples per class".into(),
        ));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(CrestError::InvalidInput(format!("spread must be positive, got {spread}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Matrix::zeros(dim, num_classes);
    for mut col in means.column_iter_mut() {
        loop {
            for v in col.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
                break;
            }
        }
    }

    let n = num_classes * per_class;
    let mut features = Matrix::zeros(dim, n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        for s in 0..per_class {
            let j = class * per_class + s;
            for r in 0..dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features[(r, j)] = means[(r, class)] + spread * noise;
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels, num_classes)
}

/// Seeded shuffle-split into `(train, test)`.
///
/// The test part gets `floor(len * test_fraction)` samples, clamped so that
/// neither part is empty. Both parts keep the original sample order.
pub fn split(ds: &LabeledDataset, seed: u64, test_fraction: f64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CrestError::InvalidInput(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = ds.len();
    if n < 2 {
        return Err(CrestError::InvalidInput("cannot split fewer than two samples".into()));
    }
    // The epsilon keeps e.g. 4500 * (1/3) from flooring to 1499.
    let n_test = ((n as f64 * test_fraction) * (1.0 + 1e-12)).floor() as usize;
    let n_test = n_test.clamp(1, n - 1);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_idx, train_idx) = order.split_at_mut(n_test);
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((ds.select(train_idx)?, ds.select(test_idx)?))
}

/// The class-sum vectors, column `i` is `M_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSums {
    columns: Matrix,
}

impl ClassSums {
    pub fn from_columns(columns: Matrix) -> Self {
        Self { columns }
    }

    /// `N x K`.
    pub fn columns(&self) -> &Matrix {
        &self.columns
    }

    pub fn num_classes(&self) -> usize {
        self.columns.ncols()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.columns.norm()
    }
}

/// `M_i = Σ_{x : c(x) = i} y(x)`.
pub fn class_sums(ds: &LabeledDataset) -> ClassSums {
    let mut columns = Matrix::zeros(ds.dim(), ds.num_classes());
    for (j, &label) in ds.labels().iter().enumerate() {
        let mut target = columns.column_mut(label);
        target += ds.features().column(j);
    }
    ClassSums { columns }
}
