//! Token-level metrics, confusion matrices and loss-curve diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("sentence {sentence}: {expected} true tags but {got} predicted")]
    Alignment { sentence: usize, expected: usize, got: usize },
    #[error("curve analysis needs at least 3 points, got {0}")]
    ShortCurve(usize),
    #[error("curve epochs must be strictly increasing (epoch {0})")]
    UnorderedCurve(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Weighted,
    Macro,
}

/// Tag value marking a position to skip, mirroring the padded label id.
pub const IGNORE_TAG: &str = "-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `counts[i][j]`: tokens with true label `i` predicted as `j`.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<usize> {
        (0..self.labels.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn total(&self) -> usize {
        self.row_sums().iter().sum()
    }

    /// Header row and first column hold label names.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(&csv_field(l));
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<LabelScores>,
    pub averaging: Averaging,
    pub include_o: bool,
    pub flat_f1: f64,
    pub accuracy: f64,
    pub tokens: usize,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn label(&self, name: &str) -> Option<&LabelScores> {
        self.labels.iter().find(|l| l.label == name)
    }

    pub fn to_table(&self) -> String {
        let w = self.labels.iter().map(|l| l.label.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<w$}  precision  recall     f1  support\n", "label");
        for l in &self.labels {
            let _ = writeln!(
                out,
                "{:<w$}  {:>9.4}  {:>6.4}  {:>5.4}  {:>7}",
                l.label, l.precision, l.recall, l.f1, l.support
            );
        }
        let avg = match self.averaging {
            Averaging::Weighted => "weighted",
            Averaging::Macro => "macro",
        };
        let o = if self.include_o { "" } else { ", O excluded" };
        let _ = writeln!(out, "\nflat F1 ({avg}{o}): {:.4}", self.flat_f1);
        let _ = writeln!(out, "token accuracy: {:.4} over {} tokens", self.accuracy, self.tokens);
        out
    }
}

/// Flattened `(true, pred)` pairs, skipping ignored positions.
fn flatten<'a, S: AsRef<str>>(truth: &'a [Vec<S>], pred: &'a [Vec<S>]) -> Result<Vec<(&'a str, &'a str)>, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::Alignment {
            sentence: truth.len().min(pred.len()),
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let mut pairs = Vec::new();
    for (i, (t, p)) in truth.iter().zip(pred).enumerate() {
        if t.len() != p.len() {
            return Err(EvalError::Alignment {
                sentence: i,
                expected: t.len(),
                got: p.len(),
            });
        }
        pairs.extend(
            t.iter()
                .zip(p)
                .map(|(a, b)| (a.as_ref(), b.as_ref()))
                .filter(|(a, _)| *a != IGNORE_TAG),
        );
    }
    Ok(pairs)
}

fn scores(pairs: &[(&str, &str)], label: &str) -> LabelScores {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for &(t, p) in pairs {
        match (t == label, p == label) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    LabelScores {
        label: label.to_string(),
        precision,
        recall,
        f1,
        support: tp + fneg,
    }
}

fn average(rows: &[LabelScores], averaging: Averaging, include_o: bool) -> f64 {
    let rows: Vec<&LabelScores> = rows
        .iter()
        .filter(|r| r.support > 0 && (include_o || r.label != "O"))
        .collect();
    match averaging {
        Averaging::Weighted => {
            let total: usize = rows.iter().map(|r| r.support).sum();
            if total == 0 {
                return 0.0;
            }
            rows.iter().map(|r| r.f1 * r.support as f64).sum::<f64>() / total as f64
        }
        Averaging::Macro => {
            if rows.is_empty() {
                return 0.0;
            }
            rows.iter().map(|r| r.f1).sum::<f64>() / rows.len() as f64
        }
    }
}

fn observed_labels(pairs: &[(&str, &str)]) -> Vec<String> {
    let set: BTreeSet<&str> = pairs.iter().flat_map(|&(t, p)| [t, p]).collect();
    set.into_iter().map(str::to_string).collect()
}

/// Token-level F1 over the flattened streams. Labels with no true support
/// are left out of the average; positions whose true tag is [`IGNORE_TAG`]
/// are skipped.
pub fn flat_f1<S: AsRef<str>>(
    truth: &[Vec<S>],
    pred: &[Vec<S>],
    averaging: Averaging,
    include_o: bool,
) -> Result<f64, EvalError> {
    let pairs = flatten(truth, pred)?;
    let rows: Vec<LabelScores> = observed_labels(&pairs).iter().map(|l| scores(&pairs, l)).collect();
    Ok(average(&rows, averaging, include_o))
}

/// Per-label precision, recall, F1 and support for the requested labels,
/// including ones absent from both streams (reported as zeros).
pub fn per_entity_report<S: AsRef<str>>(
    truth: &[Vec<S>],
    pred: &[Vec<S>],
    labels: &[&str],
) -> Result<Vec<LabelScores>, EvalError> {
    let pairs = flatten(truth, pred)?;
    Ok(labels.iter().map(|l| scores(&pairs, l)).collect())
}

/// Counts over `order`; pairs involving labels outside `order` are dropped.
pub fn confusion_matrix<S: AsRef<str>>(
    truth: &[Vec<S>],
    pred: &[Vec<S>],
    order: &[String],
) -> Result<ConfusionMatrix, EvalError> {
    let pairs = flatten(truth, pred)?;
    let index: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut counts = vec![vec![0usize; order.len()]; order.len()];
    for (t, p) in pairs {
        if let (Some(&i), Some(&j)) = (index.get(t), index.get(p)) {
            counts[i][j] += 1;
        }
    }
    Ok(ConfusionMatrix {
        labels: order.to_vec(),
        counts,
    })
}

/// Full report. `order` fixes the row order; when empty, the observed
/// labels are used in lexicographic order.
pub fn evaluate<S: AsRef<str>>(
    truth: &[Vec<S>],
    pred: &[Vec<S>],
    order: &[String],
    averaging: Averaging,
    include_o: bool,
) -> Result<EvalReport, EvalError> {
    let pairs = flatten(truth, pred)?;
    let mut labels: Vec<String> = order.to_vec();
    for l in observed_labels(&pairs) {
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    let rows: Vec<LabelScores> = labels.iter().map(|l| scores(&pairs, l)).collect();
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    Ok(EvalReport {
        flat_f1: average(&rows, averaging, include_o),
        accuracy: if pairs.is_empty() {
            0.0
        } else {
            correct as f64 / pairs.len() as f64
        },
        tokens: pairs.len(),
        confusion: confusion_matrix(truth, pred, &labels)?,
        labels: rows,
        averaging,
        include_o,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

/// Inclusive epoch range over which train loss moved less than the
/// plateau threshold per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plateau {
    pub start_epoch: usize,
    pub end_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub checkpoint_epoch: usize,
    pub best_valid_loss: f64,
    pub overfit_onset: Option<usize>,
    pub plateaus: Vec<Plateau>,
}

pub const DEFAULT_PLATEAU_EPS: f64 = 1e-3;

/// Earliest index of the minimum; NaN never wins.
pub fn argmin_earliest(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| x < xs[b] || xs[b].is_nan()) && !x.is_nan() {
            best = Some(i);
        }
    }
    best
}

/// Checkpoint is the earliest minimum of valid loss. Overfit onset is the
/// first epoch `e` where valid loss rises into `e` and again into `e + 1`
/// while train loss falls over both steps. Plateaus are maximal runs of
/// consecutive epochs with `|Δtrain| < eps`.
pub fn analyze_curve(points: &[CurvePoint], plateau_eps: f64) -> Result<CurveReport, EvalError> {
    if points.len() < 3 {
        return Err(EvalError::ShortCurve(points.len()));
    }
    for w in points.windows(2) {
        if w[1].epoch <= w[0].epoch {
            return Err(EvalError::UnorderedCurve(w[1].epoch));
        }
    }
    let valid: Vec<f64> = points.iter().map(|p| p.valid_loss).collect();
    let best = argmin_earliest(&valid).unwrap_or(0);

    let rises = |i: usize| points[i].valid_loss > points[i - 1].valid_loss;
    let falls = |i: usize| points[i].train_loss < points[i - 1].train_loss;
    let overfit_onset = (1..points.len() - 1)
        .find(|&i| rises(i) && rises(i + 1) && falls(i) && falls(i + 1))
        .map(|i| points[i].epoch);

    let mut plateaus = Vec::new();
    let mut start: Option<usize> = None;
    for i in 1..points.len() {
        let flat = (points[i].train_loss - points[i - 1].train_loss).abs() < plateau_eps;
        match (flat, start) {
            (true, None) => start = Some(i - 1),
            (false, Some(s)) => {
                plateaus.push(Plateau {
                    start_epoch: points[s].epoch,
                    end_epoch: points[i - 1].epoch,
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        plateaus.push(Plateau {
            start_epoch: points[s].epoch,
            end_epoch: points[points.len() - 1].epoch,
        });
    }
    Ok(CurveReport {
        checkpoint_epoch: points[best].epoch,
        best_valid_loss: points[best].valid_loss,
        overfit_onset,
        plateaus,
    })
}

impl CurveReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "checkpoint: epoch {} (valid loss {:.6})\n",
            self.checkpoint_epoch, self.best_valid_loss
        );
        match self.overfit_onset {
            Some(e) => {
                let _ = writeln!(out, "overfit onset: epoch {e}");
            }
            None => out.push_str("overfit onset: none\n"),
        }
        if self.plateaus.is_empty() {
            out.push_str("plateaus: none\n");
        }
        for p in &self.plateaus {
            let _ = writeln!(out, "plateau: epochs {}..={}", p.start_epoch, p.end_epoch);
        }
        out
    }
}

/// Builds curve points from 1-based parallel loss vectors.
pub fn curve_points(train: &[f64], valid: &[f64]) -> Vec<CurvePoint> {
    train
        .iter()
        .zip(valid)
        .enumerate()
        .map(|(i, (&t, &v))| CurvePoint {
            epoch: i + 1,
            train_loss: t,
            valid_loss: v,
        })
        .collect()
}
