//! Accumulated model combination: meta-outputs built from a base and a new
//! model, either by per-sample selection on scores or by a learned combiner.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{LabelVector, LogitMatrix, Matrix, PredictionBundle, ProbMatrix};
use crate::metrics::relevant_churn;
use crate::net::{push_f32s, ByteReader, MlpNet};
use crate::ops::{argmax, logit_accuracy, softmax_into};
use crate::scores::ScoreVector;
use crate::trainer::{train, Optimizer, StopMetric, TrainConfig, TrainMode, DEFAULT_PATIENCE};
use crate::Choice;

pub type ChoiceVector = Vec<Choice>;

/// `UseNew` exactly where the new model scores strictly higher on every
/// pair; ties and any loss fall back to the base model.
pub fn select_by_scores(bundle: &PredictionBundle, pairs: &[(ScoreVector, ScoreVector)]) -> Result<ChoiceVector> {
    if pairs.is_empty() {
        return Err(Error::invalid("at least one score pair is required"));
    }
    let n = bundle.len();
    for (b, m) in pairs {
        if b.len() != n || m.len() != n {
            return Err(Error::shape(format!(
                "score vectors of length {} and {} for {n} samples",
                b.len(),
                m.len()
            )));
        }
        if b.kind() != m.kind() {
            return Err(Error::invalid(format!(
                "score pair mixes {} and {}",
                b.kind(),
                m.kind()
            )));
        }
    }
    Ok((0..n)
        .map(|i| {
            if pairs.iter().all(|(b, m)| m.values()[i] > b.values()[i]) {
                Choice::UseNew
            } else {
                Choice::UseBase
            }
        })
        .collect())
}

/// Row-wise selection of base or new logits.
pub fn apply_choices(bundle: &PredictionBundle, choices: &[Choice]) -> Result<LogitMatrix> {
    let n = bundle.len();
    if choices.len() != n {
        return Err(Error::shape(format!("{} choices for {n} samples", choices.len())));
    }
    let k = bundle.classes();
    let mut data = Vec::with_capacity(n * k);
    for (i, c) in choices.iter().enumerate() {
        let src = match c {
            Choice::UseBase => bundle.base(),
            Choice::UseNew => bundle.new_model(),
        };
        data.extend_from_slice(src.row(i));
    }
    LogitMatrix::new(Matrix::new(n, k, data)?)
}

/// Element-wise mean of member logits. Each entry is summed in sorted
/// order, so the result does not depend on member order.
pub fn ensemble_average(members: &[LogitMatrix]) -> Result<LogitMatrix> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("ensemble needs at least one member"))?;
    let (n, k) = (first.rows(), first.cols());
    if let Some(m) = members.iter().find(|m| m.rows() != n || m.cols() != k) {
        return Err(Error::shape(format!(
            "member of shape {}x{} in an ensemble of {n}x{k}",
            m.rows(),
            m.cols()
        )));
    }
    let mut vals = vec![0.0; members.len()];
    let data = (0..n * k)
        .map(|e| {
            for (v, m) in vals.iter_mut().zip(members) {
                *v = m.as_slice()[e];
            }
            vals.sort_unstable_by(f64::total_cmp);
            if vals[0] == vals[vals.len() - 1] {
                vals[0]
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    LogitMatrix::new(Matrix::new(n, k, data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaKind {
    LinearLogistic,
    OneHiddenNet,
}

impl MetaKind {
    pub const HIDDEN_UNITS: usize = 100;

    fn hidden(self) -> Vec<usize> {
        match self {
            MetaKind::LinearLogistic => vec![],
            MetaKind::OneHiddenNet => vec![Self::HIDDEN_UNITS],
        }
    }

    fn code(self) -> u8 {
        match self {
            MetaKind::LinearLogistic => 0,
            MetaKind::OneHiddenNet => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub lambda: f64,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillCandidate {
    pub alpha: f64,
    pub kind: MetaKind,
    pub epochs: usize,
    /// Accuracy and negative flip rate on the whole validation bundle.
    pub accuracy: f64,
    pub relevant_churn: f64,
    pub meets_floor: bool,
}

/// Fitting record kept alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSummary {
    pub kind: MetaKind,
    pub classes: usize,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub folds: usize,
    pub seed: u64,
    pub validation_accuracy: Option<f64>,
    pub cv_table: Vec<CvEntry>,
    pub candidates: Vec<DistillCandidate>,
}

/// Combiner `h(f_b(x), f_n(x))` mapping `2k` concatenated logits to `k`
/// meta-logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    net: MlpNet,
    summary: MetaSummary,
}

pub const META_MAGIC: [u8; 4] = *b"AMCM";
const META_VERSION: u32 = 1;

impl MetaModel {
    pub fn new(kind: MetaKind, net: MlpNet, summary: MetaSummary) -> Result<Self> {
        let k = summary.classes;
        let mut sizes = vec![2 * k];
        sizes.extend(kind.hidden());
        sizes.push(k);
        if net.sizes() != sizes.as_slice() || summary.kind != kind {
            return Err(Error::shape(format!(
                "{kind:?} meta-model for {k} classes needs layers {sizes:?}, got {:?}",
                net.sizes()
            )));
        }
        Ok(Self { net, summary })
    }

    pub fn kind(&self) -> MetaKind {
        self.summary.kind
    }

    pub fn classes(&self) -> usize {
        self.summary.classes
    }

    pub fn net(&self) -> &MlpNet {
        &self.net
    }

    pub fn summary(&self) -> &MetaSummary {
        &self.summary
    }

    /// Copy with weights rounded through `f32`, as stored on disk.
    pub fn quantized(&self) -> Self {
        Self {
            net: self.net.quantized(),
            summary: self.summary.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.summary;
        let mut out = Vec::new();
        out.extend_from_slice(&META_MAGIC);
        out.extend_from_slice(&META_VERSION.to_le_bytes());
        out.push(s.kind.code());
        out.extend_from_slice(&(s.classes as u32).to_le_bytes());
        let hidden = s.kind.hidden().first().copied().unwrap_or(0);
        out.extend_from_slice(&(hidden as u32).to_le_bytes());
        for h in [s.lambda, s.alpha] {
            out.push(h.is_some() as u8);
            out.extend_from_slice(&h.unwrap_or(0.0).to_le_bytes());
        }
        out.extend_from_slice(&(s.folds as u32).to_le_bytes());
        out.extend_from_slice(&s.seed.to_le_bytes());
        push_f32s(&mut out, self.net.params())?;
        Ok(out)
    }

    /// Reads a blob written by [`MetaModel::to_bytes`]. Validation accuracy
    /// and the fitting tables are not stored and come back empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, META_MAGIC)?;
        let version = r.u32()?;
        if version != META_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let kind = match r.u8()? {
            0 => MetaKind::LinearLogistic,
            1 => MetaKind::OneHiddenNet,
            other => return Err(Error::invalid(format!("unknown meta-model kind {other}"))),
        };
        let classes = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        if !(2..=1 << 16).contains(&classes) || hidden != kind.hidden().first().copied().unwrap_or(0) {
            return Err(Error::shape(format!(
                "implausible meta-model dimensions k={classes}, hidden={hidden}"
            )));
        }
        let mut opt = || -> Result<Option<f64>> {
            let flag = r.u8()?;
            let v = r.f64()?;
            match flag {
                0 => Ok(None),
                1 => Ok(Some(v)),
                _ => Err(Error::invalid(format!("bad option flag {flag}"))),
            }
        };
        let lambda = opt()?;
        let alpha = opt()?;
        let folds = r.u32()? as usize;
        let seed = r.u64()?;
        let mut sizes = vec![2 * classes];
        sizes.extend(kind.hidden());
        sizes.push(classes);
        let count: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let params = r.f32s(count)?;
        r.finish()?;
        let net = MlpNet::from_params(&sizes, params)?;
        Self::new(
            kind,
            net,
            MetaSummary {
                kind,
                classes,
                lambda,
                alpha,
                folds,
                seed,
                validation_accuracy: None,
                cv_table: Vec::new(),
                candidates: Vec::new(),
            },
        )
    }
}

/// `[f_b(x); f_n(x)]` for every row.
pub fn meta_features(bundle: &PredictionBundle) -> Result<Matrix> {
    bundle.base().matrix().hstack(bundle.new_model().matrix())
}

/// Meta-logits for every sample of `bundle`.
pub fn stack_predict(model: &MetaModel, bundle: &PredictionBundle) -> Result<LogitMatrix> {
    if model.net.input_dim() != 2 * bundle.classes() {
        return Err(Error::shape(format!(
            "meta-model expects {} inputs, bundle provides {}",
            model.net.input_dim(),
            2 * bundle.classes()
        )));
    }
    model.net.logits(&meta_features(bundle)?)
}

pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub folds: usize,
    pub lambda_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            folds: DEFAULT_FOLDS,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            seed: 0,
        }
    }
}

/// Seeded fold assignment, stratified by label: each class is shuffled and
/// dealt round-robin, continuing where the previous class stopped.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut assign = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            assign[i] = next % folds;
            next += 1;
        }
    }
    assign
}

fn check_validation(bundle: &PredictionBundle, folds: usize) -> Result<()> {
    let labels = bundle.labels();
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::invalid("validation labels contain a single class"));
    }
    if folds < 2 {
        return Err(Error::invalid("cross-validation needs at least two folds"));
    }
    if folds > bundle.len() {
        return Err(Error::invalid(format!("{folds} folds for {} samples", bundle.len())));
    }
    Ok(())
}

/// Multinomial logistic regression on `[f_b; f_n]` with penalty `λ‖W‖²`,
/// `λ` picked by stratified k-fold accuracy (ties toward larger `λ`), then
/// refit on the whole validation bundle.
pub fn stack_fit(bundle_val: &PredictionBundle, cfg: &StackConfig) -> Result<MetaModel> {
    check_validation(bundle_val, cfg.folds)?;
    if cfg.lambda_grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    if let Some(l) = cfg.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::invalid(format!("lambda {l} must be finite and non-negative")));
    }
    let x = meta_features(bundle_val)?;
    let y = bundle_val.labels();
    let k = bundle_val.classes();
    let assign = stratified_folds(y, cfg.folds, cfg.seed);

    let mut grid = cfg.lambda_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut table = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let fold_accuracies = (0..cfg.folds)
            .map(|f| {
                let train_idx: Vec<usize> = (0..y.len()).filter(|&i| assign[i] != f).collect();
                let test_idx: Vec<usize> = (0..y.len()).filter(|&i| assign[i] == f).collect();
                if test_idx.is_empty() {
                    return Ok(f64::NAN);
                }
                let net = fit_logistic(&x.select_rows(&train_idx)?, &y.select(&train_idx), k, lambda)?;
                let logits = net.logits(&x.select_rows(&test_idx)?)?;
                logit_accuracy(&logits, &y.select(&test_idx))
            })
            .collect::<Result<Vec<f64>>>()?;
        let used: Vec<f64> = fold_accuracies.iter().copied().filter(|a| !a.is_nan()).collect();
        let mean_accuracy = used.iter().sum::<f64>() / used.len() as f64;
        table.push(CvEntry {
            lambda,
            fold_accuracies,
            mean_accuracy,
        });
    }
    // Ascending grid with `>=` keeps the largest lambda among ties.
    let best = table
        .iter()
        .fold(&table[0], |b, e| if e.mean_accuracy >= b.mean_accuracy { e } else { b });
    let lambda = best.lambda;
    let net = fit_logistic(&x, y, k, lambda)?;
    let validation_accuracy = logit_accuracy(&net.logits(&x)?, y)?;
    MetaModel::new(
        MetaKind::LinearLogistic,
        net,
        MetaSummary {
            kind: MetaKind::LinearLogistic,
            classes: k,
            lambda: Some(lambda),
            alpha: None,
            folds: cfg.folds,
            seed: cfg.seed,
            validation_accuracy: Some(validation_accuracy),
            cv_table: table,
            candidates: Vec::new(),
        },
    )
}

/// L2-penalised multinomial logistic regression fitted with L-BFGS on
/// standardised inputs; the standardisation is folded back into the
/// returned weights so the model applies to raw inputs.
fn fit_logistic(x: &Matrix, y: &LabelVector, k: usize, lambda: f64) -> Result<MlpNet> {
    let (n, d) = (x.rows(), x.cols());
    let (means, sds) = column_moments(x);
    let z = scale_columns(x, &means, &sds)?;
    let wlen = k * d;
    let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (w, b) = theta.split_at(wlen);
        let mut logits = vec![0.0; k];
        let mut p = vec![0.0; k];
        let mut loss = 0.0;
        for (i, row) in z.row_iter().enumerate() {
            for c in 0..k {
                logits[c] = b[c] + w[c * d..(c + 1) * d].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_into(&logits, &mut p);
            let yi = y[i];
            loss -= (p[yi].max(f64::MIN_POSITIVE)).ln();
            for c in 0..k {
                let r = p[c] - if c == yi { 1.0 } else { 0.0 };
                grad[wlen + c] += r;
                for (g, &v) in grad[c * d..(c + 1) * d].iter_mut().zip(row) {
                    *g += r * v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        let mut reg = 0.0;
        for (g, &wv) in grad[..wlen].iter_mut().zip(w) {
            reg += wv * wv;
            *g += 2.0 * lambda * wv;
        }
        loss * inv + lambda * reg
    };
    let theta = lbfgs(objective, vec![0.0; wlen + k], 1000, 1e-7);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("logistic regression diverged".into()));
    }
    let mut net = MlpNet::from_params(&[d, k], theta)?;
    fold_input_scaling(&mut net, &means, &sds);
    Ok(net)
}

/// Per-column mean and standard deviation (1 for constant columns).
fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|j| {
            let m = x.row_iter().map(|r| r[j]).sum::<f64>() / n;
            let v = x.row_iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            (m, if v > 0.0 { v.sqrt() } else { 1.0 })
        })
        .unzip()
}

fn scale_columns(x: &Matrix, means: &[f64], sds: &[f64]) -> Result<Matrix> {
    let d = x.cols();
    let data = x
        .as_slice()
        .iter()
        .enumerate()
        .map(|(e, v)| (v - means[e % d]) / sds[e % d])
        .collect();
    Matrix::new(x.rows(), d, data)
}

/// Rewrites the first layer so the network applies to raw inputs:
/// `w' = w / sd`, `b' = b − Σ w' · mean`.
fn fold_input_scaling(net: &mut MlpNet, means: &[f64], sds: &[f64]) {
    let (d, h) = (net.sizes()[0], net.sizes()[1]);
    let params = net.params_mut();
    let (w, rest) = params.split_at_mut(d * h);
    for (row, b) in w.chunks_exact_mut(d).zip(&mut rest[..h]) {
        for j in 0..d {
            row[j] /= sds[j];
            *b -= row[j] * means[j];
        }
    }
}

/// Limited-memory BFGS with Armijo backtracking. Stops when the largest
/// gradient component falls below `tol` or after `max_iter` iterations.
fn lbfgs(mut f: impl FnMut(&[f64], &mut [f64]) -> f64, mut x: Vec<f64>, max_iter: usize, tol: f64) -> Vec<f64> {
    const MEMORY: usize = 10;
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = std::collections::VecDeque::new();
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    for _ in 0..max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < tol {
            break;
        }
        // Two-loop recursion for the search direction.
        let mut q: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, yv, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(yv) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, yv, _)) = hist.back() {
            let gamma = dot(s, yv) / dot(yv, yv);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, yv, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(yv, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope.is_nan() || slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut step = if hist.is_empty() {
            1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0)
        } else {
            1.0
        };
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
                let yv: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
                let sy = dot(&s, &yv);
                if sy > 1e-12 {
                    if hist.len() == MEMORY {
                        hist.pop_front();
                    }
                    hist.push_back((s, yv, 1.0 / sy));
                }
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                fx = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillMetaConfig {
    pub alpha_grid: Vec<f64>,
    pub kinds: Vec<MetaKind>,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of the validation bundle held out for early stopping.
    pub holdout_fraction: f64,
    /// Minimum validation accuracy a candidate needs to be eligible.
    pub accuracy_floor: Option<f64>,
    pub seed: u64,
}

impl Default for DistillMetaConfig {
    fn default() -> Self {
        Self {
            alpha_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            kinds: vec![MetaKind::LinearLogistic, MetaKind::OneHiddenNet],
            lr: 1e-3,
            batch: 32,
            max_epochs: 200,
            patience: DEFAULT_PATIENCE,
            holdout_fraction: 0.2,
            accuracy_floor: None,
            seed: 0,
        }
    }
}

/// Fits the combiner with loss `(1−α)·CE(h, y) + α·CE(h, φ(f_b))` for every
/// `(α, kind)` candidate and keeps the one with the lowest negative flip rate
/// on the validation bundle among those meeting the accuracy floor (the most
/// accurate candidate if none does).
pub fn distill_meta_fit(
    bundle_val: &PredictionBundle,
    base_probs: &ProbMatrix,
    cfg: &DistillMetaConfig,
) -> Result<MetaModel> {
    if cfg.alpha_grid.is_empty() || cfg.kinds.is_empty() {
        return Err(Error::invalid("alpha grid and architecture list must be non-empty"));
    }
    if let Some(a) = cfg.alpha_grid.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(Error::invalid(format!("alpha {a} outside (0, 1)")));
    }
    if !(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0) {
        return Err(Error::invalid("holdout fraction must lie in (0, 1)"));
    }
    let n = bundle_val.len();
    let k = bundle_val.classes();
    if base_probs.rows() != n || base_probs.cols() != k {
        return Err(Error::shape("base probabilities must match the validation bundle"));
    }
    let folds = ((1.0 / cfg.holdout_fraction).round() as usize).max(2);
    check_validation(bundle_val, folds)?;
    let x = meta_features(bundle_val)?;
    let y = bundle_val.labels().clone();
    let assign = stratified_folds(&y, folds, cfg.seed);
    let train_idx: Vec<usize> = (0..n).filter(|&i| assign[i] != 0).collect();
    let hold_idx: Vec<usize> = (0..n).filter(|&i| assign[i] == 0).collect();
    let x_train = x.select_rows(&train_idx)?;
    let (means, sds) = column_moments(&x_train);
    let train_set = Dataset::new(scale_columns(&x_train, &means, &sds)?, y.select(&train_idx), k)?;
    let hold_set = Dataset::new(
        scale_columns(&x.select_rows(&hold_idx)?, &means, &sds)?,
        y.select(&hold_idx),
        k,
    )?;
    // Targets use the base probabilities; log-probabilities act as logits
    // that reproduce them exactly under softmax.
    let base_logp = LogitMatrix::new(
        base_probs
            .matrix()
            .select_rows(&train_idx)?
            .map(|p| p.max(1e-300).ln())?,
    )?;
    let full = Dataset::new(x, y, k)?;

    let mut candidates = Vec::new();
    let mut best: Option<(usize, MlpNet)> = None;
    for &kind in &cfg.kinds {
        for &alpha in &cfg.alpha_grid {
            let tc = TrainConfig {
                mode: TrainMode::Distill { alpha },
                optimizer: Optimizer::Adam {
                    lr: cfg.lr,
                    batch: cfg.batch,
                },
                epochs: cfg.max_epochs,
                patience: Some(cfg.patience),
                stop_on: StopMetric::Loss,
                seed: cfg.seed,
                constrained: false,
            };
            let mut out = train(&train_set, &kind.hidden(), &tc, None, Some(&base_logp), Some(&hold_set))?;
            fold_input_scaling(&mut out.net, &means, &sds);
            let logits = out.net.logits(&full.features)?;
            let accuracy = logit_accuracy(&logits, &full.labels)?;
            let churn = relevant_churn(&bundle_val.with_new(logits)?);
            candidates.push(DistillCandidate {
                alpha,
                kind,
                epochs: out.best_epoch,
                accuracy,
                relevant_churn: churn,
                meets_floor: cfg.accuracy_floor.is_none_or(|f| accuracy >= f),
            });
            let idx = candidates.len() - 1;
            let better = match &best {
                None => true,
                Some((b, _)) => candidate_better(&candidates[idx], &candidates[*b]),
            };
            if better {
                best = Some((idx, out.net));
            }
        }
    }
    let (idx, net) = best.expect("grid is non-empty");
    let chosen = candidates[idx].clone();
    MetaModel::new(
        chosen.kind,
        net,
        MetaSummary {
            kind: chosen.kind,
            classes: k,
            lambda: None,
            alpha: Some(chosen.alpha),
            folds,
            seed: cfg.seed,
            validation_accuracy: Some(chosen.accuracy),
            cv_table: Vec::new(),
            candidates,
        },
    )
}

/// Eligible beats ineligible; among eligible, lower churn then higher
/// accuracy; among ineligible, higher accuracy. Earlier candidates win ties.
fn candidate_better(a: &DistillCandidate, b: &DistillCandidate) -> bool {
    match (a.meets_floor, b.meets_floor) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => {
            a.relevant_churn < b.relevant_churn || (a.relevant_churn == b.relevant_churn && a.accuracy > b.accuracy)
        }
        (false, false) => a.accuracy > b.accuracy,
    }
}

/// Distribution of a simulated model's top-class confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum ConfidenceDist {
    PointMass {
        p: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// `a` with probability `weight_a`, otherwise `b`.
    TwoPoint {
        a: f64,
        b: f64,
        weight_a: f64,
    },
}

impl ConfidenceDist {
    fn validate(&self, k: usize) -> Result<()> {
        let lo = 1.0 / k as f64;
        let ok = |p: f64| p >= lo - 1e-12 && p <= 1.0;
        let valid = match *self {
            ConfidenceDist::PointMass { p } => ok(p),
            ConfidenceDist::Uniform { lo: a, hi: b } => ok(a) && ok(b) && a <= b,
            ConfidenceDist::TwoPoint { a, b, weight_a } => ok(a) && ok(b) && (0.0..=1.0).contains(&weight_a),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "confidence distribution {self:?} must lie within [1/{k}, 1]"
            )))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ConfidenceDist::PointMass { p } => p,
            ConfidenceDist::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..hi)
                }
            }
            ConfidenceDist::TwoPoint { a, b, weight_a } => {
                if rng.random::<f64>() < weight_a {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// Logit floor standing in for `ln 0` when a confidence is exactly 1.
const LOGIT_FLOOR: f64 = -40.0;

/// Bundle of two perfectly calibrated simulated models sharing one label
/// per sample. Each model draws a confidence `p` and is right with
/// probability `p`, otherwise it predicts a uniformly random wrong class.
/// With probability `error_correlation` both models reuse the same uniform
/// draw for the correctness and wrong-class decisions.
pub fn simulate_calibrated_pair(
    n: usize,
    k: usize,
    dist: ConfidenceDist,
    error_correlation: f64,
    seed: u64,
) -> Result<PredictionBundle> {
    if n == 0 || k < 2 {
        return Err(Error::invalid("need n >= 1 and k >= 2"));
    }
    if !(0.0..=1.0).contains(&error_correlation) {
        return Err(Error::invalid("error correlation must lie in [0, 1]"));
    }
    dist.validate(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(n * k);
    let mut new = Vec::with_capacity(n * k);
    for _ in 0..n {
        let y = rng.random_range(0..k);
        let shared = rng.random::<f64>() < error_correlation;
        let u_b: f64 = rng.random();
        let w_b = rng.random_range(0..k - 1);
        let (u_n, w_n) = if shared {
            (u_b, w_b)
        } else {
            (rng.random(), rng.random_range(0..k - 1))
        };
        for (out, u, w) in [(&mut base, u_b, w_b), (&mut new, u_n, w_n)] {
            let p = dist.sample(&mut rng);
            let pred = if u < p {
                y
            } else if w >= y {
                w + 1
            } else {
                w
            };
            let other = if p >= 1.0 {
                LOGIT_FLOOR
            } else {
                ((1.0 - p) / (k - 1) as f64).ln() - p.ln()
            };
            out.extend((0..k).map(|c| if c == pred { 0.0 } else { other }));
        }
        labels.push(y);
    }
    PredictionBundle::new(
        LogitMatrix::new(Matrix::new(n, k, base)?)?,
        LogitMatrix::new(Matrix::new(n, k, new)?)?,
        LabelVector::new(labels),
    )
}

/// Row-wise argmax of the meta-logits.
pub fn meta_predictions(logits: &LogitMatrix) -> Vec<usize> {
    logits.row_iter().map(argmax).collect()
}
