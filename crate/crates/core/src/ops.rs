//! Row-wise softmax, log-sum-exp and argmax.

use crate::error::Result;
use crate::matrix::{LabelVector, LogitMatrix, Matrix, ProbMatrix};

/// `log Σ exp(z_c)` with max subtraction.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Writes softmax(z) into `out`.
pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    out
}

pub fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| v - lse).collect()
}

pub fn softmax(logits: &LogitMatrix) -> ProbMatrix {
    let mut data = vec![0.0; logits.rows() * logits.cols()];
    for (z, out) in logits.row_iter().zip(data.chunks_exact_mut(logits.cols())) {
        softmax_into(z, out);
    }
    let m = Matrix::new(logits.rows(), logits.cols(), data).expect("softmax of finite logits is finite");
    ProbMatrix::new(m).expect("softmax rows are stochastic")
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Per-row argmax of any matrix (logits or probabilities).
pub fn hard_predict(m: &Matrix) -> LabelVector {
    LabelVector::new(m.row_iter().map(argmax).collect())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    debug_assert_eq!(predictions.len(), labels.len());
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Accuracy of a logit matrix against labels, validating lengths.
pub fn logit_accuracy(logits: &LogitMatrix, labels: &LabelVector) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(crate::Error::ShapeMismatch(format!(
            "{} rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    Ok(accuracy(&hard_predict(logits), labels))
}
