//! Accuracy and micro/macro precision, recall and F1.
//!
//! An `Unparsed` prediction is a false negative for the gold class and a
//! false positive of an extra "unparsed" pseudo-class. The pseudo-class takes
//! part in micro pooling, which keeps micro P = micro R = micro F1 =
//! accuracy, but is left out of macro averages. Per-class precision or recall
//! with an empty denominator is 0.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelSet;
use crate::labelmap::ParsedLabel;
use crate::num::MetricValue;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    Empty,
    #[error("gold label {0:?} is not in the label set")]
    UnknownGold(String),
    #[error("predicted label {0:?} is not in the label set")]
    UnknownPrediction(String),
}

/// Which classes the macro average runs over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroOver {
    /// Every class of the label set, including ones never seen in the run.
    #[default]
    LabelSet,
    /// Only classes that occur as gold or as a prediction.
    PresentClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics<S> {
    pub label: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: S,
    pub recall: S,
    pub f1: S,
}

impl<S> ClassMetrics<S> {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<S> {
    pub n: usize,
    pub accuracy: S,
    pub micro_p: S,
    pub micro_r: S,
    pub micro_f1: S,
    pub macro_p: S,
    pub macro_r: S,
    pub macro_f1: S,
    pub per_class: Vec<ClassMetrics<S>>,
    pub n_unparsed: usize,
    pub macro_over: MacroOver,
}

fn ratio<S: MetricValue>(num: usize, den: usize) -> S {
    if den == 0 {
        S::zero()
    } else {
        S::from_count(num) / S::from_count(den)
    }
}

fn harmonic<S: MetricValue>(p: &S, r: &S) -> S {
    let sum = p.clone() + r.clone();
    if sum.is_zero() {
        S::zero()
    } else {
        S::from_count(2) * p.clone() * r.clone() / sum
    }
}

fn mean<'a, S: MetricValue + 'a>(values: impl Iterator<Item = &'a S>) -> S {
    let mut n = 0;
    let mut sum = S::zero();
    for v in values {
        sum = sum + v.clone();
        n += 1;
    }
    if n == 0 {
        S::zero()
    } else {
        sum / S::from_count(n)
    }
}

/// Scores `(gold, prediction)` pairs against `label_set`.
pub fn evaluate<S: MetricValue, G: AsRef<str>>(
    pairs: &[(G, ParsedLabel)],
    label_set: &LabelSet,
    macro_over: MacroOver,
) -> Result<EvalReport<S>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = label_set.len();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    let mut present = BTreeSet::new();
    let mut correct = 0;
    let mut n_unparsed = 0;

    for (gold, pred) in pairs {
        let gold = gold.as_ref();
        let g = label_set
            .index_of(gold)
            .ok_or_else(|| EvalError::UnknownGold(gold.to_owned()))?;
        present.insert(g);
        match pred.label() {
            None => {
                n_unparsed += 1;
                fn_[g] += 1;
            }
            Some(label) => {
                let p = label_set
                    .index_of(label)
                    .ok_or_else(|| EvalError::UnknownPrediction(label.to_owned()))?;
                present.insert(p);
                if p == g {
                    tp[g] += 1;
                    correct += 1;
                } else {
                    fp[p] += 1;
                    fn_[g] += 1;
                }
            }
        }
    }

    let per_class: Vec<ClassMetrics<S>> = label_set
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let precision = ratio::<S>(tp[i], tp[i] + fp[i]);
            let recall = ratio::<S>(tp[i], tp[i] + fn_[i]);
            ClassMetrics {
                label: label.to_owned(),
                tp: tp[i],
                fp: fp[i],
                fn_: fn_[i],
                f1: harmonic(&precision, &recall),
                precision,
                recall,
            }
        })
        .collect();

    let n = pairs.len();
    let tp_sum: usize = tp.iter().sum();
    let fp_sum: usize = fp.iter().sum::<usize>() + n_unparsed;
    let fn_sum: usize = fn_.iter().sum();

    let averaged: Vec<&ClassMetrics<S>> = per_class
        .iter()
        .enumerate()
        .filter(|(i, _)| macro_over == MacroOver::LabelSet || present.contains(i))
        .map(|(_, c)| c)
        .collect();

    Ok(EvalReport {
        n,
        accuracy: ratio(correct, n),
        micro_p: ratio(tp_sum, tp_sum + fp_sum),
        micro_r: ratio(tp_sum, tp_sum + fn_sum),
        micro_f1: ratio(2 * tp_sum, 2 * tp_sum + fp_sum + fn_sum),
        macro_p: mean(averaged.iter().map(|c| &c.precision)),
        macro_r: mean(averaged.iter().map(|c| &c.recall)),
        macro_f1: mean(averaged.iter().map(|c| &c.f1)),
        per_class,
        n_unparsed,
        macro_over,
    })
}

impl<S: MetricValue> EvalReport<S> {
    pub fn to_f64(&self) -> EvalReport<f64> {
        let f = |v: &S| v.to_f64().unwrap_or(f64::NAN);
        EvalReport {
            n: self.n,
            accuracy: f(&self.accuracy),
            micro_p: f(&self.micro_p),
            micro_r: f(&self.micro_r),
            micro_f1: f(&self.micro_f1),
            macro_p: f(&self.macro_p),
            macro_r: f(&self.macro_r),
            macro_f1: f(&self.macro_f1),
            per_class: self
                .per_class
                .iter()
                .map(|c| ClassMetrics {
                    label: c.label.clone(),
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                    precision: f(&c.precision),
                    recall: f(&c.recall),
                    f1: f(&c.f1),
                })
                .collect(),
            n_unparsed: self.n_unparsed,
            macro_over: self.macro_over,
        }
    }
}

fn round_to(x: f64, places: i32) -> f64 {
    let scale = 10f64.powi(places);
    (x * scale).round() / scale
}

impl EvalReport<f64> {
    /// Copy with every metric rounded to `places` decimals.
    pub fn rounded(&self, places: i32) -> Self {
        let r = |x: f64| round_to(x, places);
        EvalReport {
            accuracy: r(self.accuracy),
            micro_p: r(self.micro_p),
            micro_r: r(self.micro_r),
            micro_f1: r(self.micro_f1),
            macro_p: r(self.macro_p),
            macro_r: r(self.macro_r),
            macro_f1: r(self.macro_f1),
            per_class: self
                .per_class
                .iter()
                .map(|c| ClassMetrics {
                    precision: r(c.precision),
                    recall: r(c.recall),
                    f1: r(c.f1),
                    ..c.clone()
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Aligned plain-text table: one summary row, then per-class counts.
    pub fn to_table(&self, row_name: &str) -> String {
        let width = row_name
            .len()
            .max(
                self.per_class
                    .iter()
                    .map(|c| c.label.len())
                    .max()
                    .unwrap_or(0),
            )
            .max(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>7} {:>7} {:>8}  {:>7} {:>7} {:>8}",
            "", "Acc", "Micro-P", "Micro-R", "Micro-F1", "Macro-P", "Macro-R", "Macro-F1"
        );
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.4}  {:>7.4} {:>7.4} {:>8.4}  {:>7.4} {:>7.4} {:>8.4}",
            row_name,
            self.accuracy,
            self.micro_p,
            self.micro_r,
            self.micro_f1,
            self.macro_p,
            self.macro_r,
            self.macro_f1
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<width$}  {:>5} {:>5} {:>5}  {:>9} {:>6} {:>6}",
            "Class", "TP", "FP", "FN", "Precision", "Recall", "F1"
        );
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:<width$}  {:>5} {:>5} {:>5}  {:>9.4} {:>6.4} {:>6.4}",
                c.label, c.tp, c.fp, c.fn_, c.precision, c.recall, c.f1
            );
        }
        let _ = writeln!(
            out,
            "\nn = {}, unparsed = {}, macro over {}, zero-denominator P/R = 0",
            self.n,
            self.n_unparsed,
            match self.macro_over {
                MacroOver::LabelSet => "all labels",
                MacroOver::PresentClasses => "present classes",
            }
        );
        out
    }
}
