//! Temperature scaling and reliability statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{LabelVector, LogitMatrix, PredictionBundle, ProbMatrix};
use crate::ops::{argmax, log_sum_exp};
use crate::scores::conf_score;
use crate::Choice;

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
pub const T_TOL: f64 = 1e-4;
pub const DEFAULT_BINS: usize = 15;
const GRID_POINTS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    GoldenSection,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    /// The optimum sits on the lower or upper end of the search interval.
    pub at_lower_bound: bool,
    pub at_upper_bound: bool,
    pub method: SearchMethod,
}

/// Mean cross-entropy of `softmax(z / t)`.
pub fn scaled_nll(logits: &LogitMatrix, labels: &[usize], t: f64) -> f64 {
    let mut scaled = vec![0.0; logits.cols()];
    let total: f64 = logits
        .row_iter()
        .zip(labels)
        .map(|(z, &y)| {
            for (s, &v) in scaled.iter_mut().zip(z) {
                *s = v / t;
            }
            log_sum_exp(&scaled) - scaled[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Fits a single temperature by minimising validation NLL over
/// `[T_MIN, T_MAX]`.
pub fn temperature_fit(logits: &LogitMatrix, labels: &LabelVector) -> Result<TemperatureFit> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    labels.check_range(logits.cols())?;
    let degenerate = logits.row_iter().all(|r| r.iter().all(|&v| v == r[0]));
    if degenerate {
        return Err(Error::invalid(
            "every logit row is constant; the likelihood does not depend on temperature",
        ));
    }
    let f = |t: f64| scaled_nll(logits, labels, t);

    let (mut a, mut b) = (T_MIN, T_MAX);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (fa, fb) = (f(a), f(b));
    let (mut fc, mut fd) = (f(c), f(d));

    let (temperature, method) = if fc > fa.max(fb) || fd > fa.max(fb) {
        (grid_search(&f), SearchMethod::Grid)
    } else {
        while b - a > T_TOL {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = f(d);
            }
        }
        let mid = 0.5 * (a + b);
        // The golden-section iterate never reaches the interval ends exactly.
        let best = [(T_MIN, fa), (mid, f(mid)), (T_MAX, fb)]
            .into_iter()
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        (best.0, SearchMethod::GoldenSection)
    };
    Ok(TemperatureFit {
        temperature,
        nll_before: f(1.0),
        nll_after: f(temperature),
        at_lower_bound: temperature - T_MIN <= 2.0 * T_TOL,
        at_upper_bound: T_MAX - temperature <= 2.0 * T_TOL,
        method,
    })
}

fn grid_search(f: &impl Fn(f64) -> f64) -> f64 {
    let (lo, hi) = (T_MIN.ln(), T_MAX.ln());
    (0..GRID_POINTS)
        .map(|i| (lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).exp())
        .map(|t| (t, f(t)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .unwrap()
        .0
}

pub fn apply_temperature(logits: &LogitMatrix, t: f64) -> Result<LogitMatrix> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {t}")));
    }
    LogitMatrix::new(logits.map(|v| v / t)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub n: usize,
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    pub mce: f64,
}

impl ReliabilityTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,count,mean_confidence,accuracy\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.lower, b.upper, b.count, b.mean_confidence, b.accuracy
            ));
        }
        out
    }
}

/// Equal-width bins over `(0, 1]` on top-class confidence; bin `i` covers
/// `(i/B, (i+1)/B]`.
pub fn reliability(probs: &ProbMatrix, labels: &LabelVector, n_bins: usize) -> Result<ReliabilityTable> {
    if n_bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    if probs.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} rows vs {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    labels.check_range(probs.cols())?;
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (row, &y) in probs.row_iter().zip(labels.iter()) {
        let pred = argmax(row);
        let conf = row[pred];
        let b = ((conf * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        hits[b] += (pred == y) as usize;
    }
    let n = labels.len();
    let mut ece = 0.0;
    let mut mce: f64 = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] > 0 {
                let c = conf_sum[b] / count[b] as f64;
                let a = hits[b] as f64 / count[b] as f64;
                let gap = (a - c).abs();
                ece += count[b] as f64 / n as f64 * gap;
                mce = mce.max(gap);
                (c, a)
            } else {
                (0.0, 0.0)
            };
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(ReliabilityTable { n, bins, ece, mce })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SwitchCounts {
    pub benign: usize,
    pub good: usize,
    pub bad: usize,
}

impl SwitchCounts {
    pub fn total(&self) -> usize {
        self.benign + self.good + self.bad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RankingChangeReport {
    pub switch_to_base: SwitchCounts,
    pub switch_to_new: SwitchCounts,
}

impl RankingChangeReport {
    pub fn total(&self) -> usize {
        self.switch_to_base.total() + self.switch_to_new.total()
    }
}

fn conf_choices(base: &LogitMatrix, new: &LogitMatrix) -> Vec<Choice> {
    let (cb, cn) = (conf_score(base), conf_score(new));
    cb.values()
        .iter()
        .zip(cn.values())
        .map(|(b, n)| if n > b { Choice::UseNew } else { Choice::UseBase })
        .collect()
}

/// Compares Conf-based selection before and after scaling each model by its
/// own temperature and classifies every sample whose selected model changed.
pub fn ranking_change_analysis(bundle: &PredictionBundle, t_base: f64, t_new: f64) -> Result<RankingChangeReport> {
    let base_scaled = apply_temperature(bundle.base(), t_base)?;
    let new_scaled = apply_temperature(bundle.new_model(), t_new)?;
    let before = conf_choices(bundle.base(), bundle.new_model());
    let after = conf_choices(&base_scaled, &new_scaled);
    let mut report = RankingChangeReport::default();
    for (i, (&old, &now)) in before.iter().zip(&after).enumerate() {
        if old == now {
            continue;
        }
        let y = bundle.labels()[i];
        let correct = |c: Choice| {
            let row = match c {
                Choice::UseBase => bundle.base().row(i),
                Choice::UseNew => bundle.new_model().row(i),
            };
            argmax(row) == y
        };
        let slot = match now {
            Choice::UseBase => &mut report.switch_to_base,
            Choice::UseNew => &mut report.switch_to_new,
        };
        match (correct(old), correct(now)) {
            (false, true) => slot.good += 1,
            (true, false) => slot.bad += 1,
            _ => slot.benign += 1,
        }
    }
    Ok(report)
}
