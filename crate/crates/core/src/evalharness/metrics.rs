use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

/// Binary confusion counts with "depressed" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, pred: Label, reference: Label) {
        match (pred, reference) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Positive, Label::Negative) => self.fp += 1,
            (Label::Negative, Label::Positive) => self.fn_ += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
        }
    }

    pub fn score(&self) -> F1Score {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Score { precision, recall, f1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Positive-class precision, recall and F1 over aligned label slices.
/// Zero denominators yield 0.
pub fn f1_labels(preds: &[Label], refs: &[Label]) -> Result<F1Score> {
    if preds.len() != refs.len() {
        return Err(Error::Alignment(format!(
            "{} predictions for {} references",
            preds.len(),
            refs.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &r) in preds.iter().zip(refs) {
        c.add(p, r);
    }
    Ok(c.score())
}

/// Per-session F1; both maps must cover the same sessions.
pub fn f1(preds: &BTreeMap<String, Label>, refs: &BTreeMap<String, Label>) -> Result<F1Score> {
    if preds.len() != refs.len() || preds.keys().zip(refs.keys()).any(|(a, b)| a != b) {
        let missing: Vec<_> = refs.keys().filter(|k| !preds.contains_key(*k)).take(3).collect();
        let extra: Vec<_> = preds.keys().filter(|k| !refs.contains_key(*k)).take(3).collect();
        return Err(Error::Alignment(format!(
            "prediction and reference session sets differ (missing {missing:?}, extra {extra:?})"
        )));
    }
    let mut c = Confusion::default();
    for (p, r) in preds.values().zip(refs.values()) {
        c.add(*p, *r);
    }
    Ok(c.score())
}
