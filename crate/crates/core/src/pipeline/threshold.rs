//! Per-region threshold selection from validation predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fallback threshold, also always included as a candidate.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdCriterion {
    /// Maximize `TPR - FPR` over the ROC.
    #[default]
    Youden,
    /// Maximize pixel Dice over the same candidates.
    Dice,
}

/// One candidate operating point; predictions `>= threshold` are positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub dice: f64,
}

impl RocPoint {
    pub fn youden(&self) -> f64 {
        self.tpr - self.fpr
    }

    pub fn score(&self, criterion: ThresholdCriterion) -> f64 {
        match criterion {
            ThresholdCriterion::Youden => self.youden(),
            ThresholdCriterion::Dice => self.dice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub criterion: ThresholdCriterion,
    pub threshold: f64,
    pub chosen: RocPoint,
    pub at_default: RocPoint,
    /// Every candidate in increasing threshold order.
    pub roc: Vec<RocPoint>,
}

fn point(threshold: f64, tp: u64, fp: u64, positives: u64, negatives: u64) -> RocPoint {
    let denom = (tp + fp + positives) as f64;
    RocPoint {
        threshold,
        tpr: tp as f64 / positives as f64,
        fpr: fp as f64 / negatives as f64,
        dice: if denom == 0.0 { 1.0 } else { 2.0 * tp as f64 / denom },
    }
}

/// Builds the ROC over the unique predicted values plus 0.5 and returns the
/// candidate maximizing `criterion`.
///
/// Ties between distinct operating points go to the smallest threshold. An
/// operating point reached by both 0.5 and an attained prediction value is
/// reported at the attained value.
pub fn select_threshold(probs: &[f32], targets: &[u8], criterion: ThresholdCriterion) -> Result<ThresholdChoice> {
    if probs.len() != targets.len() {
        return Err(Error::ExtentMismatch { op: "select_threshold", left: vec![probs.len()], right: vec![targets.len()] });
    }
    if probs.is_empty() {
        return Err(Error::Empty("threshold predictions"));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite()) {
        return Err(Error::data("select_threshold", format!("prediction {p} is not finite")));
    }
    let positives = targets.iter().filter(|&&t| t != 0).count() as u64;
    let negatives = targets.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }

    let mut pairs: Vec<(f64, bool)> = probs.iter().zip(targets).map(|(&p, &t)| (f64::from(p), t != 0)).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    // Sweep thresholds from high to low, admitting every value >= t.
    let mut roc = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut default_done = false;
    let mut i = 0;
    while i < pairs.len() {
        let value = pairs[i].0;
        if !default_done && value < DEFAULT_THRESHOLD {
            roc.push(point(DEFAULT_THRESHOLD, tp, fp, positives, negatives));
            default_done = true;
        }
        while i < pairs.len() && pairs[i].0 == value {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if value == DEFAULT_THRESHOLD {
            default_done = true;
        }
        roc.push(point(value, tp, fp, positives, negatives));
    }
    if !default_done {
        roc.push(point(DEFAULT_THRESHOLD, tp, fp, positives, negatives));
    }
    roc.reverse();

    let at_default = *roc.iter().find(|p| p.threshold == DEFAULT_THRESHOLD).expect("default candidate present");
    let mut best = 0;
    for (i, p) in roc.iter().enumerate().skip(1) {
        if p.score(criterion) > roc[best].score(criterion) {
            best = i;
        }
    }
    let same_point = |a: &RocPoint, b: &RocPoint| a.tpr == b.tpr && a.fpr == b.fpr;
    if roc[best].threshold == DEFAULT_THRESHOLD && best + 1 < roc.len() && same_point(&roc[best], &roc[best + 1]) {
        best += 1;
    }
    let chosen = roc[best];
    Ok(ThresholdChoice { criterion, threshold: chosen.threshold, chosen, at_default, roc })
}
