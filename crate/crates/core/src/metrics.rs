//! Churn between two model versions and related flip statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{CheckpointSeries, LabelVector, PredictionBundle};
use crate::ops::{argmax, hard_predict};
use crate::Choice;

/// How a sample's hard prediction changed from the base to the new model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlipKind {
    /// Both models predict the same class.
    Agree,
    /// Base correct, new wrong.
    Negative,
    /// Base wrong, new correct.
    Positive,
    /// Both wrong, different classes.
    Benign,
}

pub fn flip_kinds(bundle: &PredictionBundle) -> Vec<FlipKind> {
    let base = bundle.base();
    let new = bundle.new_model();
    bundle
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| classify(argmax(base.row(i)), argmax(new.row(i)), y))
        .collect()
}

fn classify(pb: usize, pn: usize, y: usize) -> FlipKind {
    if pb == pn {
        FlipKind::Agree
    } else if pb == y {
        FlipKind::Negative
    } else if pn == y {
        FlipKind::Positive
    } else {
        FlipKind::Benign
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub n: usize,
    pub churn: f64,
    pub relevant_churn: f64,
    pub negative_flips: usize,
    pub positive_flips: usize,
    pub benign_flips: usize,
    pub base_accuracy: f64,
    pub new_accuracy: f64,
}

/// Fraction of samples whose hard predictions differ.
pub fn churn(bundle: &PredictionBundle) -> f64 {
    let disagree = flip_kinds(bundle).iter().filter(|k| **k != FlipKind::Agree).count();
    disagree as f64 / bundle.len() as f64
}

/// Negative flip rate: base correct and new different.
pub fn relevant_churn(bundle: &PredictionBundle) -> f64 {
    let nf = flip_kinds(bundle).iter().filter(|k| **k == FlipKind::Negative).count();
    nf as f64 / bundle.len() as f64
}

pub fn flip_decomposition(bundle: &PredictionBundle) -> FlipReport {
    let n = bundle.len();
    let (mut nf, mut pf, mut benign) = (0usize, 0usize, 0usize);
    for k in flip_kinds(bundle) {
        match k {
            FlipKind::Negative => nf += 1,
            FlipKind::Positive => pf += 1,
            FlipKind::Benign => benign += 1,
            FlipKind::Agree => {}
        }
    }
    let labels = bundle.labels().as_slice();
    let base_hits = hard_predict(bundle.base())
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    let new_hits = hard_predict(bundle.new_model())
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    FlipReport {
        n,
        churn: (nf + pf + benign) as f64 / n as f64,
        relevant_churn: nf as f64 / n as f64,
        negative_flips: nf,
        positive_flips: pf,
        benign_flips: benign,
        base_accuracy: base_hits as f64 / n as f64,
        new_accuracy: new_hits as f64 / n as f64,
    }
}

/// Sizes of two sets and their intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SetOverlap {
    pub both: usize,
    pub only_a: usize,
    pub only_b: usize,
}

/// Overlap between the flips two choice vectors eliminate relative to the
/// unmodified new model. A flip is eliminated when the choice falls back to
/// the base model on that sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlipOverlap {
    pub negative: SetOverlap,
    pub positive: SetOverlap,
}

pub fn flip_overlap(bundle: &PredictionBundle, choices_a: &[Choice], choices_b: &[Choice]) -> Result<FlipOverlap> {
    let n = bundle.len();
    if choices_a.len() != n || choices_b.len() != n {
        return Err(Error::shape(format!(
            "choice vectors of length {} and {} for {n} samples",
            choices_a.len(),
            choices_b.len()
        )));
    }
    let mut out = FlipOverlap::default();
    for ((kind, &a), &b) in flip_kinds(bundle).iter().zip(choices_a).zip(choices_b) {
        let set = match kind {
            FlipKind::Negative => &mut out.negative,
            FlipKind::Positive => &mut out.positive,
            _ => continue,
        };
        match (a == Choice::UseBase, b == Choice::UseBase) {
            (true, true) => set.both += 1,
            (true, false) => set.only_a += 1,
            (false, true) => set.only_b += 1,
            (false, false) => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgettingRecord {
    /// Number of correct-to-incorrect transitions per sample.
    pub counts: Vec<usize>,
    /// Samples correct at the final epoch that were never forgotten.
    pub unforgettable: Vec<usize>,
}

pub fn forgetting_events(series: &CheckpointSeries, labels: &LabelVector) -> Result<ForgettingRecord> {
    if series.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} checkpoint rows vs {} labels",
            series.rows(),
            labels.len()
        )));
    }
    labels.check_range(series.classes())?;
    let n = labels.len();
    let mut counts = vec![0usize; n];
    let mut prev: Option<Vec<bool>> = None;
    let mut correct = vec![false; n];
    for epoch in series.epochs() {
        for (i, c) in correct.iter_mut().enumerate() {
            *c = argmax(epoch.row(i)) == labels[i];
        }
        if let Some(p) = &prev {
            for i in 0..n {
                if p[i] && !correct[i] {
                    counts[i] += 1;
                }
            }
        }
        prev = Some(correct.clone());
    }
    let unforgettable = (0..n).filter(|&i| counts[i] == 0 && correct[i]).collect();
    Ok(ForgettingRecord { counts, unforgettable })
}

/// Expected number of negative flips that Conf selection cannot remove:
/// `Σ_{x ∈ NF} s_b(x) (1 − s_n(x))`.
pub fn irreducible_nf_estimate(bundle: &PredictionBundle, scores_base: &[f64], scores_new: &[f64]) -> Result<f64> {
    let n = bundle.len();
    if scores_base.len() != n || scores_new.len() != n {
        return Err(Error::shape("score vectors must match bundle length"));
    }
    if let Some(v) = scores_base.iter().chain(scores_new).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("score {v} outside [0, 1]")));
    }
    Ok(flip_kinds(bundle)
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == FlipKind::Negative)
        .map(|(i, _)| scores_base[i] * (1.0 - scores_new[i]))
        .sum())
}
