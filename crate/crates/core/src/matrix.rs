//! Dense row-major matrices and the typed views used throughout the crate.
//!
//! Values are held as `f64` in memory. Every constructor validates shape and
//! finiteness so downstream code can index without re-checking.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, non-empty, row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("matrix must be non-empty, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Applies `f` element-wise, re-validating finiteness of the result.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Keeps the listed rows, in the listed order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::new(idx.len(), self.cols, data)
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(format!(
                "cannot stack {} rows beside {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Self::new(self.rows, cols, data)
    }
}

/// Pre-softmax model outputs: `n` samples by `k >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitMatrix(Matrix);

impl LogitMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.cols() < 2 {
            return Err(Error::shape(format!(
                "logits need at least 2 classes, got {}",
                m.cols()
            )));
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl Deref for LogitMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// Row-stochastic matrix of class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    pub const ROW_SUM_TOL: f64 = 1e-6;

    pub fn new(m: Matrix) -> Result<Self> {
        if m.cols() < 2 {
            return Err(Error::shape("probabilities need at least 2 classes"));
        }
        for (i, r) in m.row_iter().enumerate() {
            if r.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::invalid(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

impl Deref for ProbMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// Per-sample feature embeddings (`rows` samples by `dims` features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    pub fn new(m: Matrix) -> Self {
        Self(m)
    }

    pub fn dims(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

impl Deref for EmbeddingMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// Ground-truth class indices, 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(Vec<usize>);

impl LabelVector {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    /// Fails on the first label `>= classes`.
    pub fn check_range(&self, classes: usize) -> Result<()> {
        match self.0.iter().position(|&l| l >= classes) {
            Some(index) => Err(Error::LabelOutOfRange {
                index,
                label: self.0[index],
                classes,
            }),
            None => Ok(()),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self(idx.iter().map(|&i| self.0[i]).collect())
    }
}

impl Deref for LabelVector {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for LabelVector {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// Base and new model outputs over one evaluation set, with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    base: LogitMatrix,
    new: LogitMatrix,
    labels: LabelVector,
}

impl PredictionBundle {
    pub fn new(base: LogitMatrix, new: LogitMatrix, labels: LabelVector) -> Result<Self> {
        validate_parts(&base, &new, &labels)?;
        Ok(Self { base, new, labels })
    }

    pub fn base(&self) -> &LogitMatrix {
        &self.base
    }

    pub fn new_model(&self) -> &LogitMatrix {
        &self.new
    }

    pub fn labels(&self) -> &LabelVector {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.base.classes()
    }

    /// Same base and labels with a different "new" output, e.g. a combined model.
    pub fn with_new(&self, new: LogitMatrix) -> Result<Self> {
        Self::new(self.base.clone(), new, self.labels.clone())
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            LogitMatrix::new(self.base.select_rows(idx)?)?,
            LogitMatrix::new(self.new.select_rows(idx)?)?,
            self.labels.select(idx),
        )
    }
}

/// Checks every bundle invariant on loose parts.
pub fn validate_bundle(base: &LogitMatrix, new: &LogitMatrix, labels: &LabelVector) -> Result<()> {
    validate_parts(base, new, labels)
}

fn validate_parts(base: &LogitMatrix, new: &LogitMatrix, labels: &LabelVector) -> Result<()> {
    if base.rows() != new.rows() || base.cols() != new.cols() {
        return Err(Error::shape(format!(
            "base is {}x{} but new is {}x{}",
            base.rows(),
            base.cols(),
            new.rows(),
            new.cols()
        )));
    }
    if labels.len() != base.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} rows",
            labels.len(),
            base.rows()
        )));
    }
    labels.check_range(base.cols())
}

/// Per-epoch logits of one model over one fixed sample set, epochs in order.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSeries {
    epochs: Vec<LogitMatrix>,
}

impl CheckpointSeries {
    pub fn new(epochs: Vec<LogitMatrix>) -> Result<Self> {
        let first = epochs
            .first()
            .ok_or_else(|| Error::invalid("checkpoint series is empty"))?;
        let (r, c) = (first.rows(), first.cols());
        if let Some(t) = epochs.iter().position(|m| m.rows() != r || m.cols() != c) {
            return Err(Error::shape(format!(
                "epoch {} is {}x{}, expected {r}x{c}",
                t + 1,
                epochs[t].rows(),
                epochs[t].cols()
            )));
        }
        Ok(Self { epochs })
    }

    pub fn epochs(&self) -> &[LogitMatrix] {
        &self.epochs
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.epochs[0].rows()
    }

    pub fn classes(&self) -> usize {
        self.epochs[0].cols()
    }

    pub fn last(&self) -> &LogitMatrix {
        self.epochs.last().expect("non-empty by construction")
    }
}
