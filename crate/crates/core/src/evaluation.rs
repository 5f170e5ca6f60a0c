//! ROC AUC, stratified bootstrap confidence intervals and binary
//! classification metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_CI_LEVEL: f64 = 0.95;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("AUC is undefined: only one class present")]
    SingleClass,
    #[error("length mismatch: {scores} scores, {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("invalid bootstrap settings: {0}")]
    InvalidSettings(String),
    #[error("kappa is undefined: chance agreement is 1")]
    DegenerateMarginals,
}

/// 2×2 confusion counts with class 1 as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl Confusion {
    /// From a matrix with rows = actual (1, 0) and columns = predicted (1, 0).
    pub fn from_rows(m: [[u64; 2]; 2]) -> Self {
        Confusion {
            tp: m[0][0],
            fn_: m[0][1],
            fp: m[1][0],
            tn: m[1][1],
        }
    }

    pub fn rows(&self) -> [[u64; 2]; 2] {
        [[self.tp, self.fn_], [self.fp, self.tn]]
    }

    pub fn n(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn record(&mut self, predicted: Label, actual: Label) {
        match (actual, predicted) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Positive, Label::Negative) => self.fn_ += 1,
            (Label::Negative, Label::Positive) => self.fp += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
        }
    }
}

/// Agreement between predictions and reference labels. Every metric is a
/// function of `confusion` alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// `None` when chance agreement is 1 (both sides constant and equal).
    pub kappa: Option<f64>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: u64,
    pub confusion: Confusion,
    /// Set when a metric had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl AgreementReport {
    /// Each metric is formed as one integer ratio so it is correctly rounded.
    pub fn from_confusion(c: Confusion) -> Self {
        let Confusion { tp, fn_, fp, tn } = c;
        let n = c.n();
        let (accuracy, acc_zero) = ratio(tp + tn, n);
        let (precision, p_zero) = ratio(tp, tp + fp);
        let (recall, r_zero) = ratio(tp, tp + fn_);
        let (f1, f_zero) = ratio(2 * tp, 2 * tp + fp + fn_);
        // κ = 2(TP·TN − FN·FP) / ((TP+FP)(FP+TN) + (TP+FN)(FN+TN))
        let num = 2 * (tp as i128 * tn as i128 - fn_ as i128 * fp as i128);
        let den = (tp + fp) as i128 * (fp + tn) as i128 + (tp + fn_) as i128 * (fn_ + tn) as i128;
        let kappa = (den != 0).then(|| num as f64 / den as f64);
        AgreementReport {
            kappa,
            accuracy,
            precision,
            recall,
            f1,
            n,
            confusion: c,
            zero_division: acc_zero || p_zero || r_zero || f_zero,
        }
    }

    pub fn kappa(&self) -> Result<f64, EvalError> {
        self.kappa.ok_or(EvalError::DegenerateMarginals)
    }

    /// True when every field equals its recomputation from `confusion`.
    pub fn is_self_consistent(&self) -> bool {
        *self == AgreementReport::from_confusion(self.confusion)
    }
}

/// Binary metrics with class 1 as the positive class.
pub fn classification_metrics(
    preds: &[Label],
    labels: &[Label],
) -> Result<AgreementReport, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut c = Confusion::default();
    for (&p, &a) in preds.iter().zip(labels) {
        c.record(p, a);
    }
    Ok(AgreementReport::from_confusion(c))
}

/// Thresholds probabilities at 0.5 (ties go to class 1).
pub fn threshold(probs: &[f64]) -> Vec<Label> {
    probs
        .iter()
        .map(|&p| {
            if p >= 0.5 {
                Label::Positive
            } else {
                Label::Negative
            }
        })
        .collect()
}

pub fn accuracy(probs: &[f64], labels: &[Label]) -> Result<f64, EvalError> {
    Ok(classification_metrics(&threshold(probs), labels)?.accuracy)
}

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    Ok(())
}

/// Mann-Whitney AUC from positive and negative score lists, with ties
/// counted one half through average ranks.
fn auc_split(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        let k = all[i..=j].iter().filter(|(_, p)| *p).count();
        rank_sum_pos += avg * k as f64;
        i = j + 1;
    }
    let n_pos = pos.len() as f64;
    let n_neg = neg.len() as f64;
    (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

fn split_by_label(scores: &[f64], labels: &[Label]) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        match l {
            Label::Positive => pos.push(s),
            Label::Negative => neg.push(s),
        }
    }
    (pos, neg)
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64, EvalError> {
    check_inputs(scores, labels)?;
    let (pos, neg) = split_by_label(scores, labels);
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::SingleClass);
    }
    Ok(auc_split(&pos, &neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
    pub ci_level: f64,
    pub seed: u64,
    /// Set when the percentile interval excluded the point estimate and was
    /// widened to contain it.
    #[serde(default)]
    pub widened: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub ci_level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: DEFAULT_RESAMPLES,
            ci_level: DEFAULT_CI_LEVEL,
            seed: 0,
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// RNG for one resample: the stream is selected by the resample index so
/// resamples are independent of evaluation order.
fn resample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Resample AUCs from class-stratified draws with replacement.
pub fn bootstrap_distribution(
    scores: &[f64],
    labels: &[Label],
    n_resamples: usize,
    seed: u64,
) -> Result<Vec<f64>, EvalError> {
    check_inputs(scores, labels)?;
    let (pos, neg) = split_by_label(scores, labels);
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::SingleClass);
    }
    Ok((0..n_resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = resample_rng(seed, b);
            let p: Vec<f64> = (0..pos.len())
                .map(|_| pos[rng.gen_range(0..pos.len())])
                .collect();
            let n: Vec<f64> = (0..neg.len())
                .map(|_| neg[rng.gen_range(0..neg.len())])
                .collect();
            auc_split(&p, &n)
        })
        .collect())
}

/// Full-sample AUC with a percentile bootstrap interval.
pub fn bootstrap_auc(
    scores: &[f64],
    labels: &[Label],
    cfg: &BootstrapConfig,
) -> Result<EvalResult, EvalError> {
    if cfg.n_resamples == 0 {
        return Err(EvalError::InvalidSettings(
            "n_resamples must be at least 1".into(),
        ));
    }
    if !(cfg.ci_level > 0.0 && cfg.ci_level < 1.0) {
        return Err(EvalError::InvalidSettings(format!(
            "ci_level {} outside (0, 1)",
            cfg.ci_level
        )));
    }
    let auc = roc_auc(scores, labels)?;
    let mut dist = bootstrap_distribution(scores, labels, cfg.n_resamples, cfg.seed)?;
    dist.sort_by(f64::total_cmp);
    let alpha = (1.0 - cfg.ci_level) / 2.0;
    let mut ci_low = quantile(&dist, alpha);
    let mut ci_high = quantile(&dist, 1.0 - alpha);
    let widened = auc < ci_low || auc > ci_high;
    if widened {
        log::warn!("bootstrap interval [{ci_low}, {ci_high}] excludes AUC {auc}; widening");
        ci_low = ci_low.min(auc);
        ci_high = ci_high.max(auc);
    }
    Ok(EvalResult {
        auc,
        ci_low,
        ci_high,
        n_resamples: cfg.n_resamples,
        ci_level: cfg.ci_level,
        seed: cfg.seed,
        widened,
    })
}
