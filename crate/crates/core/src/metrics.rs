//! Confusion matrices, precision/recall/F1 and comparison reports.
//!
//! All scores are percentages in `[0, 100]`. For every averaging scheme the
//! aggregate F1 is the harmonic mean of the aggregate precision and recall,
//! which is also how the per-class F1 relates to its own P and R.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::RelationLabel;
use crate::error::{Error, Result};

/// 4x4 count matrix; rows are gold labels, columns predictions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 4]; 4],
}

impl ConfusionMatrix {
    pub fn add(&mut self, gold: RelationLabel, pred: RelationLabel) {
        self.counts[gold.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn true_positives(&self, c: usize) -> usize {
        self.counts[c][c]
    }

    fn gold_count(&self, c: usize) -> usize {
        self.counts[c].iter().sum()
    }

    fn predicted_count(&self, c: usize) -> usize {
        self.counts.iter().map(|row| row[c]).sum()
    }
}

pub fn confusion(preds: &[RelationLabel], golds: &[RelationLabel]) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: golds.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &g) in preds.iter().zip(golds) {
        cm.add(g, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: [ClassScores; 4],
    pub macro_avg: Aggregate,
    pub micro_avg: Aggregate,
    pub weighted_avg: Aggregate,
}

/// Harmonic mean of a precision/recall pair (percent in, percent out);
/// zero when both are zero.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio_pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Precision/recall/F1 per class plus macro, micro and support-weighted
/// aggregates from a confusion matrix.
pub fn prf(matrix: &ConfusionMatrix) -> Result<Metrics> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::EmptyInput("confusion matrix has no observations"));
    }

    let mut per_class = [ClassScores {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        support: 0,
    }; 4];
    for (c, scores) in per_class.iter_mut().enumerate() {
        let tp = matrix.true_positives(c);
        let precision = ratio_pct(tp, matrix.predicted_count(c));
        let recall = ratio_pct(tp, matrix.gold_count(c));
        *scores = ClassScores {
            precision,
            recall,
            f1: f1_from_pr(precision, recall),
            support: matrix.gold_count(c),
        };
    }

    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / 4.0;
    let macro_p = mean(|s| s.precision);
    let macro_r = mean(|s| s.recall);

    let weighted = |f: fn(&ClassScores) -> f64| {
        per_class
            .iter()
            .map(|s| f(s) * s.support as f64)
            .sum::<f64>()
            / total as f64
    };
    let weighted_p = weighted(|s| s.precision);
    let weighted_r = weighted(|s| s.recall);

    // Single-label multiclass: micro precision = micro recall = accuracy.
    let correct: usize = (0..4).map(|c| matrix.true_positives(c)).sum();
    let micro = ratio_pct(correct, total);

    Ok(Metrics {
        per_class,
        macro_avg: Aggregate {
            precision: macro_p,
            recall: macro_r,
            f1: f1_from_pr(macro_p, macro_r),
        },
        micro_avg: Aggregate {
            precision: micro,
            recall: micro,
            f1: micro,
        },
        weighted_avg: Aggregate {
            precision: weighted_p,
            recall: weighted_r,
            f1: f1_from_pr(weighted_p, weighted_r),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Macro,
    Micro,
    Weighted,
}

impl Averaging {
    pub fn select(self, m: &Metrics) -> Aggregate {
        match self {
            Averaging::Macro => m.macro_avg,
            Averaging::Micro => m.micro_avg,
            Averaging::Weighted => m.weighted_avg,
        }
    }
}

impl FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "micro" => Ok(Averaging::Micro),
            "weighted" => Ok(Averaging::Weighted),
            other => Err(Error::Config(format!(
                "unknown averaging '{other}' (expected macro|micro|weighted)"
            ))),
        }
    }
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Averaging::Macro => write!(f, "macro"),
            Averaging::Micro => write!(f, "micro"),
            Averaging::Weighted => write!(f, "weighted"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub delta_precision: f64,
    pub delta_recall: f64,
    pub delta_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub averaging: Averaging,
    pub reference: String,
    pub rows: Vec<ReportRow>,
}

impl Report {
    /// Aligned text table, percentages rounded to 2 decimals.
    pub fn to_text(&self) -> String {
        let name_width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max("model".len());
        let mut out = format!(
            "{:<name_width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
            "model", "P", "R", "F1", "dP", "dR", "dF1"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<name_width$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>+8.2}  {:>+8.2}  {:>+8.2}\n",
                r.name, r.precision, r.recall, r.f1, r.delta_precision, r.delta_recall, r.delta_f1
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Tabulate each variant's aggregate scores plus signed deltas against the
/// named reference variant.
pub fn report(
    variants: &[(String, Metrics)],
    reference: &str,
    averaging: Averaging,
) -> Result<Report> {
    let reference_agg = variants
        .iter()
        .find(|(name, _)| name == reference)
        .map(|(_, m)| averaging.select(m))
        .ok_or_else(|| Error::Config(format!("reference variant '{reference}' not present")))?;

    let rows = variants
        .iter()
        .map(|(name, m)| {
            let agg = averaging.select(m);
            ReportRow {
                name: name.clone(),
                precision: agg.precision,
                recall: agg.recall,
                f1: agg.f1,
                delta_precision: agg.precision - reference_agg.precision,
                delta_recall: agg.recall - reference_agg.recall,
                delta_f1: agg.f1 - reference_agg.f1,
            }
        })
        .collect();

    Ok(Report {
        averaging,
        reference: reference.to_string(),
        rows,
    })
}
