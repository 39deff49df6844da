//! Training of small MLP classifiers with the churn-reduction baselines
//! (cold start, warm start, distillation, focal distillation), per-sample
//! gradients, and the self-consistency experiment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{CheckpointSeries, LabelVector, LogitMatrix, Matrix, ProbMatrix};
use crate::net::MlpNet;
use crate::ops::{argmax, softmax, softmax_row};
use crate::qp::{compatibility_with, dual_qp_solve_from, norm, GradientSet, QpOptions};

pub use crate::qp::{compatibility, dual_qp_solve, Compatibility, QpSolution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrainMode {
    Cold,
    WarmStart,
    Distill { alpha: f64 },
    Focal { alpha: f64, eps: f64 },
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Cold => "cold",
            TrainMode::WarmStart => "warm",
            TrainMode::Distill { .. } => "distill",
            TrainMode::Focal { .. } => "focal",
        }
    }

    fn needs_base_logits(self) -> bool {
        matches!(self, TrainMode::Distill { .. } | TrainMode::Focal { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "optimizer", rename_all = "snake_case")]
pub enum Optimizer {
    FullBatchGd { lr: f64, unit_norm: bool },
    Adam { lr: f64, batch: usize },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { lr: 1e-3, batch: 32 }
    }
}

/// Quantity on the monitoring set that early stopping tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    #[default]
    Accuracy,
    /// Mean cross-entropy against the labels.
    Loss,
}

pub const DEFAULT_PATIENCE: usize = 5;
pub const DEFAULT_FOCAL_EPS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub optimizer: Optimizer,
    /// Maximum number of epochs.
    pub epochs: usize,
    /// Stop after this many epochs without a monitor improvement and keep
    /// the best parameters.
    pub patience: Option<usize>,
    #[serde(default)]
    pub stop_on: StopMetric,
    pub seed: u64,
    /// Project the full-batch step onto the cone compatible with every
    /// per-sample gradient.
    pub constrained: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Cold,
            optimizer: Optimizer::default(),
            epochs: 100,
            patience: None,
            stop_on: StopMetric::Accuracy,
            seed: 0,
            constrained: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            TrainMode::Distill { alpha } => check_alpha(alpha)?,
            TrainMode::Focal { alpha, eps } => {
                check_alpha(alpha)?;
                check_eps(eps)?;
            }
            _ => {}
        }
        match self.optimizer {
            Optimizer::FullBatchGd { lr, .. } if !(lr >= 0.0 && lr.is_finite()) => {
                return Err(Error::invalid(format!(
                    "learning rate {lr} must be finite and non-negative"
                )));
            }
            Optimizer::Adam { lr, batch } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::invalid(format!("learning rate {lr} must be positive")));
                }
                if batch == 0 {
                    return Err(Error::invalid("batch size must be positive"));
                }
                if self.constrained {
                    return Err(Error::invalid(
                        "constrained training requires full-batch gradient descent",
                    ));
                }
            }
            _ => {}
        }
        if self.patience == Some(0) {
            return Err(Error::invalid("patience must be positive"));
        }
        Ok(())
    }

    /// Applies one `key = value` setting. Recognised keys: `mode`, `alpha`,
    /// `eps`, `optimizer` (`adam` or `gd`), `lr`, `batch`, `unit_norm`,
    /// `epochs`, `patience` (`none` disables), `stop_on` (`accuracy` or
    /// `loss`), `seed`, `constrained`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::invalid(format!("invalid value {value:?} for {what}"));
        let float = |what: &str| value.parse::<f64>().map_err(|_| bad(what));
        let uint = |what: &str| value.parse::<usize>().map_err(|_| bad(what));
        let boolean = |what: &str| match value {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad(what)),
        };
        let (alpha, eps) = match self.mode {
            TrainMode::Distill { alpha } => (alpha, DEFAULT_FOCAL_EPS),
            TrainMode::Focal { alpha, eps } => (alpha, eps),
            _ => (0.5, DEFAULT_FOCAL_EPS),
        };
        let (lr, batch, unit_norm) = match self.optimizer {
            Optimizer::Adam { lr, batch } => (lr, batch, false),
            Optimizer::FullBatchGd { lr, unit_norm } => (lr, 32, unit_norm),
        };
        match key {
            "mode" => {
                self.mode = match value {
                    "cold" => TrainMode::Cold,
                    "warm" | "warm_start" => TrainMode::WarmStart,
                    "distill" => TrainMode::Distill { alpha },
                    "focal" => TrainMode::Focal { alpha, eps },
                    _ => return Err(bad("mode")),
                }
            }
            "alpha" => {
                let a = float("alpha")?;
                match &mut self.mode {
                    TrainMode::Distill { alpha } | TrainMode::Focal { alpha, .. } => *alpha = a,
                    _ => {
                        return Err(Error::invalid(
                            "alpha only applies to distill and focal modes; set mode first",
                        ))
                    }
                }
            }
            "eps" => {
                let e = float("eps")?;
                match &mut self.mode {
                    TrainMode::Focal { eps, .. } => *eps = e,
                    _ => return Err(Error::invalid("eps only applies to focal mode; set mode first")),
                }
            }
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => Optimizer::Adam { lr, batch },
                    "gd" | "full_batch_gd" => Optimizer::FullBatchGd { lr, unit_norm },
                    _ => return Err(bad("optimizer")),
                }
            }
            "lr" => {
                let v = float("lr")?;
                match &mut self.optimizer {
                    Optimizer::Adam { lr, .. } | Optimizer::FullBatchGd { lr, .. } => *lr = v,
                }
            }
            "batch" => match &mut self.optimizer {
                Optimizer::Adam { batch, .. } => *batch = uint("batch")?,
                _ => return Err(Error::invalid("batch only applies to the adam optimizer")),
            },
            "unit_norm" => match &mut self.optimizer {
                Optimizer::FullBatchGd { unit_norm, .. } => *unit_norm = boolean("unit_norm")?,
                _ => return Err(Error::invalid("unit_norm only applies to the gd optimizer")),
            },
            "epochs" => self.epochs = uint("epochs")?,
            "patience" => self.patience = if value == "none" { None } else { Some(uint("patience")?) },
            "stop_on" => {
                self.stop_on = match value {
                    "accuracy" => StopMetric::Accuracy,
                    "loss" => StopMetric::Loss,
                    _ => return Err(bad("stop_on")),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "constrained" => self.constrained = boolean("constrained")?,
            _ => return Err(Error::invalid(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text, applied in order (blank lines and `#` comments ignored).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i as u64 + 1,
                message: "expected key = value".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps {eps} must be positive")));
    }
    Ok(())
}

/// Cross-entropy against a soft target, skipping zero-weight classes.
fn soft_ce(p: &[f64], t: &[f64]) -> f64 {
    p.iter()
        .zip(t)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.ln())
        .sum()
}

fn check_loss_inputs(probs: &ProbMatrix, labels: &LabelVector, base: &ProbMatrix) -> Result<()> {
    if probs.rows() != labels.len() || base.rows() != probs.rows() || base.cols() != probs.cols() {
        return Err(Error::shape(
            "probabilities, base probabilities and labels must agree in shape",
        ));
    }
    labels.check_range(probs.cols())
}

/// Mean of `(1−α)·CE(p, y) + α·CE(p, p_base)`.
pub fn loss_distill(probs: &ProbMatrix, labels: &LabelVector, base_probs: &ProbMatrix, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_loss_inputs(probs, labels, base_probs)?;
    let n = labels.len();
    let total: f64 = (0..n)
        .map(|i| {
            let p = probs.row(i);
            (1.0 - alpha) * -p[labels[i]].ln() + alpha * soft_ce(p, base_probs.row(i))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean of `(1−α)·CE(p, y) + α·CE(p, t)` where `t` is the base distribution
/// on samples the base model gets right and `ε·e_y` elsewhere.
pub fn loss_focal(
    probs: &ProbMatrix,
    labels: &LabelVector,
    base_probs: &ProbMatrix,
    base_correct: &[bool],
    alpha: f64,
    eps: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_eps(eps)?;
    check_loss_inputs(probs, labels, base_probs)?;
    if base_correct.len() != labels.len() {
        return Err(Error::shape("one correctness flag per sample required"));
    }
    let n = labels.len();
    let total: f64 = (0..n)
        .map(|i| {
            let p = probs.row(i);
            let y = labels[i];
            let second = if base_correct[i] {
                soft_ce(p, base_probs.row(i))
            } else {
                -eps * p[y].ln()
            };
            (1.0 - alpha) * -p[y].ln() + alpha * second
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-sample soft targets for the given mode, `n × k` row-major.
fn build_targets(
    mode: TrainMode,
    labels: &LabelVector,
    k: usize,
    base_logits: Option<&LogitMatrix>,
) -> Result<Vec<f64>> {
    let n = labels.len();
    let mut t = vec![0.0; n * k];
    let base_probs = match (mode.needs_base_logits(), base_logits) {
        (true, Some(b)) => {
            if b.rows() != n || b.cols() != k {
                return Err(Error::shape(format!(
                    "base logits are {}x{}, training set needs {n}x{k}",
                    b.rows(),
                    b.cols()
                )));
            }
            Some(softmax(b))
        }
        (true, None) => {
            return Err(Error::invalid(format!(
                "{} mode requires base logits on the training set",
                mode.name()
            )))
        }
        (false, _) => None,
    };
    for i in 0..n {
        let y = labels[i];
        let row = &mut t[i * k..(i + 1) * k];
        match mode {
            TrainMode::Cold | TrainMode::WarmStart => row[y] = 1.0,
            TrainMode::Distill { alpha } => {
                let pb = base_probs.as_ref().unwrap().row(i);
                for (c, v) in row.iter_mut().enumerate() {
                    *v = alpha * pb[c];
                }
                row[y] += 1.0 - alpha;
            }
            TrainMode::Focal { alpha, eps } => {
                let pb = base_probs.as_ref().unwrap().row(i);
                if argmax(pb) == y {
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = alpha * pb[c];
                    }
                    row[y] += 1.0 - alpha;
                } else {
                    row[y] = (1.0 - alpha) + alpha * eps;
                }
            }
        }
    }
    Ok(t)
}

fn onehot_targets(labels: &[usize], k: usize) -> Vec<f64> {
    let mut t = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        t[i * k + y] = 1.0;
    }
    t
}

/// Exact per-sample cross-entropy gradients.
pub fn per_sample_gradients(net: &MlpNet, features: &Matrix, labels: &LabelVector) -> Result<GradientSet> {
    check_data(net, features, labels)?;
    let k = net.output_dim();
    let targets = onehot_targets(labels, k);
    per_sample_with_targets(net, features, &targets).map(|(gs, _, _)| gs)
}

fn check_data(net: &MlpNet, features: &Matrix, labels: &LabelVector) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} rows vs {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if features.cols() != net.input_dim() {
        return Err(Error::shape(format!(
            "features have {} columns, network expects {}",
            features.cols(),
            net.input_dim()
        )));
    }
    labels.check_range(net.output_dim())
}

/// Per-sample gradients, mean loss and per-sample predictions.
fn per_sample_with_targets(net: &MlpNet, features: &Matrix, targets: &[f64]) -> Result<(GradientSet, f64, Vec<usize>)> {
    let n = features.rows();
    let k = net.output_dim();
    let p = net.param_count();
    let mut grads = vec![0.0; n * p];
    let mut dlogits = vec![0.0; k];
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(n);
    for (i, x) in features.row_iter().enumerate() {
        let cache = net.forward_cached(x);
        preds.push(argmax(cache.logits()));
        loss += MlpNet::soft_ce_grad(cache.logits(), &targets[i * k..(i + 1) * k], &mut dlogits);
        net.backward(&cache, &dlogits, &mut grads[i * p..(i + 1) * p]);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite training loss".into()));
    }
    let gs = GradientSet::new(n, p, grads)?;
    Ok((gs, loss / n as f64, preds))
}

/// Mean gradient and mean loss over `idx`.
fn batch_gradient(net: &MlpNet, features: &Matrix, targets: &[f64], idx: &[usize], grad: &mut [f64]) -> f64 {
    let k = net.output_dim();
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut dlogits = vec![0.0; k];
    let mut loss = 0.0;
    for &i in idx {
        let cache = net.forward_cached(features.row(i));
        loss += MlpNet::soft_ce_grad(cache.logits(), &targets[i * k..(i + 1) * k], &mut dlogits);
        net.backward(&cache, &dlogits, grad);
    }
    let m = idx.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    loss / m
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: MlpNet,
    /// Logits on the monitoring set after each kept epoch.
    pub checkpoints: CheckpointSeries,
    /// Logits on the monitoring set before the first update.
    pub initial_logits: LogitMatrix,
    /// Mean training loss per epoch (before that epoch's updates).
    pub losses: Vec<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, p: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; p],
            v: vec![0.0; p],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((w, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains an MLP with hidden widths `hidden` on `data`.
///
/// `monitor` (default: the training set) receives per-epoch logits and
/// drives early stopping. Warm start copies `base`; distill and focal modes
/// read `base_logits` on the training set.
pub fn train(
    data: &Dataset,
    hidden: &[usize],
    cfg: &TrainConfig,
    base: Option<&MlpNet>,
    base_logits: Option<&LogitMatrix>,
    monitor: Option<&Dataset>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    let k = data.classes;
    let mut sizes = vec![data.dim()];
    sizes.extend_from_slice(hidden);
    sizes.push(k);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = match cfg.mode {
        TrainMode::WarmStart => {
            let b = base.ok_or_else(|| Error::invalid("warm start requires a base network"))?;
            if b.input_dim() != data.dim() || b.output_dim() != k {
                return Err(Error::shape(format!(
                    "base network maps {} -> {}, data needs {} -> {k}",
                    b.input_dim(),
                    b.output_dim(),
                    data.dim()
                )));
            }
            b.clone()
        }
        _ => MlpNet::new(&sizes, &mut rng)?,
    };
    check_data(&net, &data.features, &data.labels)?;
    let targets = build_targets(cfg.mode, &data.labels, k, base_logits)?;
    let monitor = monitor.unwrap_or(data);
    if monitor.classes != k || monitor.dim() != data.dim() {
        return Err(Error::shape("monitoring set must match the training data's shape"));
    }

    let n = data.len();
    let p = net.param_count();
    let initial_logits = net.logits(&monitor.features)?;
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0; p];
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = match cfg.optimizer {
        Optimizer::Adam { lr, .. } => Some(Adam::new(lr, p)),
        _ => None,
    };
    let mut lambda: Option<Vec<f64>> = None;
    let qp_opts = QpOptions::default();

    let mut best = (f64::NEG_INFINITY, 0usize, net.clone());
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        let loss = match cfg.optimizer {
            Optimizer::FullBatchGd { lr, unit_norm } => {
                let (direction, loss) = if cfg.constrained {
                    let (gs, loss, _) = per_sample_with_targets(&net, &data.features, &targets)?;
                    let sol = dual_qp_solve_from(&gs, lambda.as_deref(), &qp_opts)?;
                    lambda = Some(sol.lambda);
                    (sol.projected, loss)
                } else {
                    let loss = batch_gradient(&net, &data.features, &targets, &order, &mut grad);
                    (grad.clone(), loss)
                };
                apply_step(&mut net, &direction, lr, unit_norm);
                loss
            }
            Optimizer::Adam { batch, .. } => {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for chunk in order.chunks(batch) {
                    total += batch_gradient(&net, &data.features, &targets, chunk, &mut grad) * chunk.len() as f64;
                    adam.as_mut().unwrap().step(net.params_mut(), &grad);
                }
                total / n as f64
            }
        };
        if !loss.is_finite() || net.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("training diverged at epoch {epoch}")));
        }
        losses.push(loss);
        let logits = net.logits(&monitor.features)?;
        let score = match cfg.stop_on {
            StopMetric::Accuracy => crate::ops::logit_accuracy(&logits, &monitor.labels)?,
            StopMetric::Loss => {
                let total: f64 = logits
                    .row_iter()
                    .zip(monitor.labels.iter())
                    .map(|(z, &y)| sample_loss(z, y))
                    .sum();
                -total / monitor.len() as f64
            }
        };
        checkpoints.push(logits);
        epochs_run = epoch;
        if score > best.0 {
            best = (score, epoch, net.clone());
        }
        if let Some(patience) = cfg.patience {
            if epoch - best.1 >= patience {
                break;
            }
        }
    }
    let (net, best_epoch) = if cfg.patience.is_some() {
        checkpoints.truncate(best.1);
        (best.2, best.1)
    } else {
        (net, epochs_run)
    };
    if checkpoints.is_empty() {
        // Nothing beat the initial weights; keep one snapshot of them.
        checkpoints.push(initial_logits.clone());
    }
    Ok(TrainOutput {
        net,
        checkpoints: CheckpointSeries::new(checkpoints)?,
        initial_logits,
        losses,
        epochs_run,
        best_epoch,
    })
}

/// `θ ← θ − lr·d`, with `d` rescaled to unit norm if asked. Returns the
/// length of the applied step.
fn apply_step(net: &mut MlpNet, direction: &[f64], lr: f64, unit_norm: bool) -> f64 {
    let dn = norm(direction);
    let scale = if unit_norm {
        if dn == 0.0 {
            return 0.0;
        }
        lr / dn
    } else {
        lr
    };
    for (w, &d) in net.params_mut().iter_mut().zip(direction) {
        *w -= scale * d;
    }
    scale * dn
}

/// Cosine below `-COS_TOL` counts as incompatible after projection, so
/// samples left orthogonal by the solver are not flagged by rounding.
pub const COS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistencyEpoch {
    pub epoch: usize,
    pub train_accuracy: f64,
    /// Mean loss after this epoch's update.
    pub loss: f64,
    pub negative_flips: usize,
    pub cumulative_negative_flips: usize,
    /// Samples whose gradient opposes the plain batch gradient.
    pub incompatible_before: usize,
    /// Samples whose gradient opposes the applied direction.
    pub incompatible_after: usize,
    pub cos_min: f64,
    pub cos_median: f64,
    pub cos_max: f64,
    pub qp_iterations: usize,
    pub step_norm: f64,
    pub loss_increased: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistencySummary {
    pub epochs: usize,
    pub samples: usize,
    pub constrained: bool,
    pub unit_norm: bool,
    pub lr: f64,
    pub seed: u64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub cumulative_negative_flips: usize,
    pub max_incompatible_fraction_before: f64,
    pub max_incompatible_fraction_after: f64,
    pub loss_increases: usize,
    /// First epoch after which training accuracy stayed at 100%.
    pub epoch_reached_full_accuracy: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistencyTrace {
    pub summary: SelfConsistencySummary,
    pub epochs: Vec<SelfConsistencyEpoch>,
}

impl SelfConsistencyTrace {
    pub const CSV_HEADER: &'static str = "epoch,train_accuracy,loss,negative_flips,cumulative_negative_flips,incompatible_before,incompatible_after,cos_min,cos_median,cos_max,qp_iterations,step_norm,loss_increased";

    /// One row per epoch; floats use `fmt` so callers control precision.
    pub fn to_csv_with(&self, fmt: impl Fn(f64) -> String) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                fmt(e.train_accuracy),
                fmt(e.loss),
                e.negative_flips,
                e.cumulative_negative_flips,
                e.incompatible_before,
                e.incompatible_after,
                fmt(e.cos_min),
                fmt(e.cos_median),
                fmt(e.cos_max),
                e.qp_iterations,
                fmt(e.step_norm),
                e.loss_increased
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        self.to_csv_with(|v| v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistencyConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub constrained: bool,
    pub unit_norm: bool,
    pub seed: u64,
}

/// Full-batch training on `data` recording forgetting and gradient
/// compatibility after every epoch.
pub fn self_consistency_run(data: &Dataset, cfg: &SelfConsistencyConfig) -> Result<SelfConsistencyTrace> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate {} must be finite and non-negative",
            cfg.lr
        )));
    }
    let k = data.classes;
    let n = data.len();
    let mut sizes = vec![data.dim()];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(k);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = MlpNet::new(&sizes, &mut rng)?;
    let targets = onehot_targets(&data.labels, k);
    let qp_opts = QpOptions::default();

    let (mut gs, mut loss, mut preds) = per_sample_with_targets(&net, &data.features, &targets)?;
    let correct =
        |preds: &[usize]| -> Vec<bool> { preds.iter().zip(data.labels.iter()).map(|(p, y)| p == y).collect() };
    let mut was_correct = correct(&preds);
    let initial_accuracy = fraction(&was_correct);
    let mut lambda: Option<Vec<f64>> = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut cumulative = 0;
    for epoch in 1..=cfg.epochs {
        let before = compatibility(&gs);
        let (direction, qp_iterations) = if cfg.constrained {
            let sol = dual_qp_solve_from(&gs, lambda.as_deref(), &qp_opts)?;
            let it = sol.iterations;
            lambda = Some(sol.lambda);
            (sol.projected, it)
        } else {
            (gs.mean().to_vec(), 0)
        };
        let after = compatibility_with(&gs, &direction, COS_TOL);
        let step_norm = apply_step(&mut net, &direction, cfg.lr, cfg.unit_norm);
        if net.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("training diverged at epoch {epoch}")));
        }
        let prev_loss = loss;
        (gs, loss, preds) = per_sample_with_targets(&net, &data.features, &targets)?;
        let now_correct = correct(&preds);
        let flips = was_correct.iter().zip(&now_correct).filter(|(&a, &b)| a && !b).count();
        cumulative += flips;
        was_correct = now_correct;
        let (cos_min, cos_median, cos_max) = summarize(&before.cosines);
        records.push(SelfConsistencyEpoch {
            epoch,
            train_accuracy: fraction(&was_correct),
            loss,
            negative_flips: flips,
            cumulative_negative_flips: cumulative,
            incompatible_before: before.incompatible.len(),
            incompatible_after: after.incompatible.len(),
            cos_min,
            cos_median,
            cos_max,
            qp_iterations,
            step_norm,
            loss_increased: loss > prev_loss,
        });
    }
    let max_frac =
        |f: fn(&SelfConsistencyEpoch) -> usize| records.iter().map(|r| f(r) as f64 / n as f64).fold(0.0, f64::max);
    let mut reached = None;
    for r in records.iter().rev() {
        if r.train_accuracy < 1.0 {
            break;
        }
        reached = Some(r.epoch);
    }
    let summary = SelfConsistencySummary {
        epochs: cfg.epochs,
        samples: n,
        constrained: cfg.constrained,
        unit_norm: cfg.unit_norm,
        lr: cfg.lr,
        seed: cfg.seed,
        initial_accuracy,
        final_accuracy: records.last().map_or(initial_accuracy, |r| r.train_accuracy),
        final_loss: loss,
        cumulative_negative_flips: cumulative,
        max_incompatible_fraction_before: max_frac(|r| r.incompatible_before),
        max_incompatible_fraction_after: max_frac(|r| r.incompatible_after),
        loss_increases: records.iter().filter(|r| r.loss_increased).count(),
        epoch_reached_full_accuracy: reached,
    };
    Ok(SelfConsistencyTrace {
        summary,
        epochs: records,
    })
}

fn fraction(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
}

fn summarize(v: &[f64]) -> (f64, f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mid = s.len() / 2;
    let median = if s.len() % 2 == 1 {
        s[mid]
    } else {
        0.5 * (s[mid - 1] + s[mid])
    };
    (s[0], median, s[s.len() - 1])
}

/// Predicted probabilities of `net` on `features`.
pub fn predict_probs(net: &MlpNet, features: &Matrix) -> Result<ProbMatrix> {
    Ok(softmax(&net.logits(features)?))
}

/// Cross-entropy of a single logit row against class `y`.
pub fn sample_loss(logits: &[f64], y: usize) -> f64 {
    -softmax_row(logits)[y].ln()
}
