//! Small synthetic classification datasets for desk-scale experiments.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::matrix::{LabelVector, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: LabelVector,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: LabelVector, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        labels.check_range(classes)?;
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.features.select_rows(idx)?, self.labels.select(idx), self.classes)
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..end).collect();
        self.subset(&idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthKind {
    /// Isotropic Gaussian clusters. Centers sit on a circle of radius
    /// `separation` in the first two coordinates; extra coordinates of each
    /// center are drawn from `N(0, separation²)`.
    Blobs {
        classes: usize,
        dim: usize,
        separation: f64,
        spread: f64,
    },
    /// Two interleaved spirals (binary, 2-D).
    TwoSpirals { noise: f64 },
    /// Random subset of a dataset stored as a matrix file plus a label file.
    FromFile { features: PathBuf, labels: PathBuf },
}

impl SynthKind {
    pub fn blobs(classes: usize) -> Self {
        SynthKind::Blobs {
            classes,
            dim: 2,
            separation: 2.0,
            spread: 1.0,
        }
    }
}

/// Builds `n` samples deterministically from `seed`, with features
/// standardised to zero mean and unit variance per column.
pub fn synth_dataset(kind: &SynthKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, labels, classes) = match *kind {
        SynthKind::Blobs {
            classes,
            dim,
            separation,
            spread,
        } => blobs(&mut rng, n, classes, dim, separation, spread)?,
        SynthKind::TwoSpirals { noise } => spirals(&mut rng, n, noise)?,
        SynthKind::FromFile {
            ref features,
            ref labels,
        } => {
            let x = io::read_matrix(features)?;
            let y = io::read_labels(labels)?;
            if x.rows() != y.len() {
                return Err(Error::shape(format!("{} feature rows vs {} labels", x.rows(), y.len())));
            }
            if n > x.rows() {
                return Err(Error::invalid(format!(
                    "asked for {n} samples from a file with {}",
                    x.rows()
                )));
            }
            let mut idx: Vec<usize> = (0..x.rows()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(n);
            let classes = y.iter().copied().max().unwrap_or(0) + 1;
            let rows = idx.iter().map(|&i| x.row(i).to_vec()).collect();
            (rows, idx.iter().map(|&i| y[i]).collect(), classes.max(2))
        }
    };
    let features = standardize(Matrix::from_rows(&rows)?);
    Dataset::new(features, LabelVector::new(labels), classes)
}

type Raw = (Vec<Vec<f64>>, Vec<usize>, usize);

fn blobs(rng: &mut ChaCha8Rng, n: usize, classes: usize, dim: usize, separation: f64, spread: f64) -> Result<Raw> {
    if classes < 2 || dim < 2 || spread.is_nan() || spread <= 0.0 || !separation.is_finite() {
        return Err(Error::invalid(
            "blobs need classes >= 2, dim >= 2, finite separation and positive spread",
        ));
    }
    let extra = Normal::new(0.0, separation.abs().max(f64::MIN_POSITIVE)).unwrap();
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let angle = std::f64::consts::TAU * c as f64 / classes as f64;
            let mut v = vec![separation * angle.cos(), separation * angle.sin()];
            v.extend((2..dim).map(|_| extra.sample(rng)));
            v
        })
        .collect();
    let noise = Normal::new(0.0, spread).unwrap();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.sort_unstable();
    labels.shuffle(rng);
    let rows = labels
        .iter()
        .map(|&c| centers[c].iter().map(|&m| m + noise.sample(rng)).collect())
        .collect();
    Ok((rows, labels, classes))
}

fn spirals(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> Result<Raw> {
    if noise.is_nan() || noise < 0.0 {
        return Err(Error::invalid("spiral noise must be non-negative"));
    }
    let jitter = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(rng);
    let rows = labels
        .iter()
        .map(|&c| {
            let t: f64 = rng.random_range(0.05..1.0);
            let angle = 3.0 * std::f64::consts::PI * t + c as f64 * std::f64::consts::PI;
            let r = 5.0 * t;
            vec![
                r * angle.cos() + jitter.sample(rng),
                r * angle.sin() + jitter.sample(rng),
            ]
        })
        .collect();
    Ok((rows, labels, 2))
}

/// Centres every column and scales it to unit variance (constant columns
/// are only centred).
pub fn standardize(m: Matrix) -> Matrix {
    let (rows, cols) = (m.rows(), m.cols());
    let mut data = m.into_vec();
    for j in 0..cols {
        let mean = (0..rows).map(|i| data[i * cols + j]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|i| (data[i * cols + j] - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..rows {
            data[i * cols + j] = (data[i * cols + j] - mean) / sd;
        }
    }
    Matrix::new(rows, cols, data).expect("standardising finite data stays finite")
}
