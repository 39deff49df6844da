//! Per-sample scores used to choose between two models.
//!
//! All scores are "higher means more trustworthy". Confidence-type scores are
//! probabilities; the out-of-distribution scores (negative entropy, negative
//! energy, KL divergence from uniform and its gradient norm) are unbounded.

use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{CheckpointSeries, EmbeddingMatrix, LogitMatrix, Matrix};
use crate::ops::{argmax, log_sum_exp, softmax_into};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Conf,
    AvgConf,
    Entropy,
    Energy,
    KlDiv,
    GradNorm,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Conf => "conf",
            ScoreKind::AvgConf => "avgconf",
            ScoreKind::Entropy => "entropy",
            ScoreKind::Energy => "energy",
            ScoreKind::KlDiv => "kldiv",
            ScoreKind::GradNorm => "gradnorm",
        }
    }

    fn is_probability(self) -> bool {
        matches!(self, ScoreKind::Conf | ScoreKind::AvgConf)
    }

    /// Score computed directly from one logit matrix, if this kind allows it.
    pub fn from_logits(self, logits: &LogitMatrix) -> Option<ScoreVector> {
        Some(match self {
            ScoreKind::Conf => conf_score(logits),
            ScoreKind::Entropy => entropy_score(logits),
            ScoreKind::Energy => energy_score(logits),
            ScoreKind::KlDiv => kldiv_score(logits),
            ScoreKind::GradNorm => gradnorm_score(logits),
            ScoreKind::AvgConf => return None,
        })
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    kind: ScoreKind,
    values: Vec<f64>,
}

impl ScoreVector {
    pub fn new(kind: ScoreKind, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i, col: 0 });
        }
        if kind.is_probability() {
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!("{kind} score {v} outside [0, 1]")));
            }
        }
        Ok(Self { kind, values })
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// n×1 matrix suitable for the binary matrix format.
    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::new(self.values.len(), 1, self.values.clone())
    }

    /// Single-column CSV with the score kind as header.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", self.kind);
        for v in &self.values {
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

fn per_row(kind: ScoreKind, logits: &LogitMatrix, f: impl FnMut(&[f64]) -> f64) -> ScoreVector {
    let values = logits.row_iter().map(f).collect();
    ScoreVector::new(kind, values).expect("scores of finite logits are finite")
}

/// Top-class softmax probability.
pub fn conf_score(logits: &LogitMatrix) -> ScoreVector {
    let mut p = vec![0.0; logits.cols()];
    per_row(ScoreKind::Conf, logits, |z| {
        softmax_into(z, &mut p);
        p.iter().copied().fold(0.0, f64::max)
    })
}

/// Negative entropy `Σ p_c ln p_c` of the softmax distribution.
pub fn entropy_score(logits: &LogitMatrix) -> ScoreVector {
    let mut p = vec![0.0; logits.cols()];
    per_row(ScoreKind::Entropy, logits, |z| {
        softmax_into(z, &mut p);
        let lse = log_sum_exp(z);
        p.iter().zip(z).map(|(&pc, &zc)| pc * (zc - lse)).sum()
    })
}

/// Negative free energy `ln Σ exp(z_c)`.
pub fn energy_score(logits: &LogitMatrix) -> ScoreVector {
    per_row(ScoreKind::Energy, logits, log_sum_exp)
}

/// `D_KL(u ‖ softmax(z))` with `u` uniform over the k classes.
pub fn kldiv_score(logits: &LogitMatrix) -> ScoreVector {
    per_row(ScoreKind::KlDiv, logits, kl_uniform_row)
}

pub(crate) fn kl_uniform_row(z: &[f64]) -> f64 {
    // Σ (1/k) ln((1/k) / p_c) = −ln k − mean(z) + lse(z)
    let k = z.len() as f64;
    let mean = z.iter().sum::<f64>() / k;
    (log_sum_exp(z) - mean - k.ln()).max(0.0)
}

/// L1 norm of the gradient of the KL-to-uniform score with respect to the
/// logits, which is `Σ_c |p_c − 1/k|`.
pub fn gradnorm_score(logits: &LogitMatrix) -> ScoreVector {
    let mut p = vec![0.0; logits.cols()];
    let inv_k = 1.0 / logits.cols() as f64;
    per_row(ScoreKind::GradNorm, logits, |z| {
        softmax_into(z, &mut p);
        p.iter().map(|&pc| (pc - inv_k).abs()).sum()
    })
}

/// Mean probability, over all checkpoints, of the class predicted at the
/// final checkpoint.
pub fn avgconf_exact(series: &CheckpointSeries) -> ScoreVector {
    let n = series.rows();
    let k = series.classes();
    let last = series.last();
    let predicted: Vec<usize> = (0..n).map(|i| argmax(last.row(i))).collect();
    let mut sums = vec![0.0; n];
    let mut p = vec![0.0; k];
    for epoch in series.epochs() {
        for (i, s) in sums.iter_mut().enumerate() {
            softmax_into(epoch.row(i), &mut p);
            *s += p[predicted[i]];
        }
    }
    let t = series.len() as f64;
    let values = sums.into_iter().map(|s| (s / t).clamp(0.0, 1.0)).collect();
    ScoreVector::new(ScoreKind::AvgConf, values).expect("probabilities are in range")
}

/// Default neighbour count for the AvgConf estimator.
pub const DEFAULT_KNN_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSearch {
    #[default]
    BruteForce,
    KdTree,
}

/// Validation embeddings with their exact AvgConf scores, used to estimate
/// AvgConf for unseen samples from their nearest validation neighbours.
#[derive(Debug, Clone)]
pub struct AvgConfIndex {
    embeddings: EmbeddingMatrix,
    scores: ScoreVector,
    k: usize,
    tree: Option<KdTree>,
}

impl AvgConfIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn scores(&self) -> &ScoreVector {
        &self.scores
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }
}

pub fn knn_avgconf_fit(
    embeddings: EmbeddingMatrix,
    series: &CheckpointSeries,
    k: usize,
    search: NeighborSearch,
) -> Result<AvgConfIndex> {
    if embeddings.rows() != series.rows() {
        return Err(Error::shape(format!(
            "{} embeddings vs {} checkpoint rows",
            embeddings.rows(),
            series.rows()
        )));
    }
    if k == 0 || k > embeddings.rows() {
        return Err(Error::invalid(format!("k = {k} must be in [1, {}]", embeddings.rows())));
    }
    let scores = avgconf_exact(series);
    let tree = match search {
        NeighborSearch::BruteForce => None,
        NeighborSearch::KdTree => Some(KdTree::build(&embeddings)),
    };
    Ok(AvgConfIndex {
        embeddings,
        scores,
        k,
        tree,
    })
}

/// Mean AvgConf of the `k` nearest validation embeddings (Euclidean). Points
/// tied with the k-th distance are all included.
pub fn knn_avgconf_estimate(index: &AvgConfIndex, query: &EmbeddingMatrix) -> Result<ScoreVector> {
    if query.dims() != index.embeddings.dims() {
        return Err(Error::shape(format!(
            "query has {} dims, index has {}",
            query.dims(),
            index.embeddings.dims()
        )));
    }
    let values = query
        .row_iter()
        .map(|q| {
            let mut hits = match &index.tree {
                Some(tree) => tree.neighbors_with_ties(&index.embeddings, q, index.k),
                None => brute_force_neighbors(&index.embeddings, q, index.k),
            };
            hits.sort_unstable();
            let s: f64 = hits.iter().map(|&i| index.scores.values[i]).sum();
            (s / hits.len() as f64).clamp(0.0, 1.0)
        })
        .collect();
    ScoreVector::new(ScoreKind::AvgConf, values)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of every point within the k-th smallest distance of `q`.
pub fn brute_force_neighbors(points: &Matrix, q: &[f64], k: usize) -> Vec<usize> {
    let d: Vec<f64> = points.row_iter().map(|p| sq_dist(p, q)).collect();
    let mut sorted = d.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let radius = sorted[k - 1];
    (0..d.len()).filter(|&i| d[i] <= radius).collect()
}

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf(Vec<usize>),
    Split {
        dim: usize,
        value: f64,
        left: Box<KdNode>,
        right: Box<KdNode>,
    },
}

#[derive(Debug, Clone)]
struct KdTree {
    root: KdNode,
}

impl KdTree {
    fn build(points: &Matrix) -> Self {
        let idx: Vec<usize> = (0..points.rows()).collect();
        Self {
            root: Self::build_node(points, idx),
        }
    }

    fn build_node(points: &Matrix, mut idx: Vec<usize>) -> KdNode {
        if idx.len() <= LEAF_SIZE {
            return KdNode::Leaf(idx);
        }
        let dims = points.cols();
        let mut best = (0, -1.0);
        for d in 0..dims {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = points.get(i, d);
                (lo.min(v), hi.max(v))
            });
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        let dim = best.0;
        if best.1 <= 0.0 {
            return KdNode::Leaf(idx);
        }
        idx.sort_unstable_by(|&a, &b| points.get(a, dim).total_cmp(&points.get(b, dim)));
        let mid = idx.len() / 2;
        let value = points.get(idx[mid], dim);
        // Left holds values < split, right holds values >= split.
        let cut = idx.partition_point(|&i| points.get(i, dim) < value);
        if cut == 0 {
            return KdNode::Leaf(idx);
        }
        let right = idx.split_off(cut);
        KdNode::Split {
            dim,
            value,
            left: Box::new(Self::build_node(points, idx)),
            right: Box::new(Self::build_node(points, right)),
        }
    }

    fn neighbors_with_ties(&self, points: &Matrix, q: &[f64], k: usize) -> Vec<usize> {
        // Non-negative f64 order equals the order of their bit patterns.
        let mut heap: BinaryHeap<u64> = BinaryHeap::with_capacity(k + 1);
        Self::knn(&self.root, points, q, k, &mut heap);
        let radius = f64::from_bits(*heap.peek().expect("k >= 1"));
        let mut out = Vec::new();
        Self::within(&self.root, points, q, radius, &mut out);
        out
    }

    fn knn(node: &KdNode, points: &Matrix, q: &[f64], k: usize, heap: &mut BinaryHeap<u64>) {
        match node {
            KdNode::Leaf(idx) => {
                for &i in idx {
                    let d = sq_dist(points.row(i), q).to_bits();
                    if heap.len() < k {
                        heap.push(d);
                    } else if d < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(d);
                    }
                }
            }
            KdNode::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                Self::knn(near, points, q, k, heap);
                let plane = (diff * diff).to_bits();
                if heap.len() < k || plane <= *heap.peek().unwrap() {
                    Self::knn(far, points, q, k, heap);
                }
            }
        }
    }

    fn within(node: &KdNode, points: &Matrix, q: &[f64], radius: f64, out: &mut Vec<usize>) {
        match node {
            KdNode::Leaf(idx) => {
                out.extend(idx.iter().copied().filter(|&i| sq_dist(points.row(i), q) <= radius));
            }
            KdNode::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                Self::within(near, points, q, radius, out);
                if diff * diff <= radius {
                    Self::within(far, points, q, radius, out);
                }
            }
        }
    }
}
