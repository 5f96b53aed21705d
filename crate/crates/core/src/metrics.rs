//! Competition metrics: per-class F1, macro F1, total accuracy, and the
//! combined score 0.67*F1 + 0.33*Acc.

use std::fmt;
use std::path::Path;

use crate::dataio;
use crate::error::{FerError, Result};
use crate::inference;
use crate::labels::NUM_CLASSES;

/// Rows are true classes, columns predicted. Frames with true label -1 are
/// never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(y_true: &[i64], y_pred: &[i64]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(FerError::InvalidInput(format!(
                "length mismatch: {} true vs {} predicted",
                y_true.len(),
                y_pred.len()
            )));
        }
        let mut counts = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t == -1 {
                continue;
            }
            if !(0..NUM_CLASSES as i64).contains(&t) {
                return Err(FerError::InvalidInput(format!("true label {t} out of range")));
            }
            if !(0..NUM_CLASSES as i64).contains(&p) {
                return Err(FerError::InvalidInput(format!(
                    "prediction {p} out of range (models never emit -1)"
                )));
            }
            counts[t as usize][p as usize] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub confusion: ConfusionMatrix,
    pub precision: [f64; NUM_CLASSES],
    pub recall: [f64; NUM_CLASSES],
    pub f1: [f64; NUM_CLASSES],
    pub support: [u64; NUM_CLASSES],
    pub macro_f1: f64,
    pub total_accuracy: f64,
    pub e_total: f64,
}

/// Per-class F1 with the 0/0 -> 0 convention, averaged over all 7 classes.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(per_class_f1(cm)?.iter().sum::<f64>() / NUM_CLASSES as f64)
}

pub fn per_class_f1(cm: &ConfusionMatrix) -> Result<[f64; NUM_CLASSES]> {
    if cm.total() == 0 {
        return Err(FerError::Eval("empty confusion matrix".into()));
    }
    let (p, r) = precision_recall(cm);
    let mut f1 = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let denom = p[c] + r[c];
        f1[c] = if denom > 0.0 {
            2.0 * p[c] * r[c] / denom
        } else {
            0.0
        };
    }
    Ok(f1)
}

fn precision_recall(cm: &ConfusionMatrix) -> ([f64; NUM_CLASSES], [f64; NUM_CLASSES]) {
    let mut precision = [0.0; NUM_CLASSES];
    let mut recall = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let tp = cm.counts[c][c];
        let fp: u64 = (0..NUM_CLASSES).map(|t| cm.counts[t][c]).sum::<u64>() - tp;
        let fn_: u64 = cm.support(c) - tp;
        precision[c] = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        recall[c] = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
    }
    (precision, recall)
}

pub fn total_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(FerError::Eval("empty confusion matrix".into()));
    }
    let correct: u64 = (0..NUM_CLASSES).map(|c| cm.counts[c][c]).sum();
    Ok(correct as f64 / total as f64)
}

/// Combined competition score.
pub fn e_total(f1: f64, acc: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&f1) || !(0.0..=1.0).contains(&acc) {
        return Err(FerError::InvalidInput(format!(
            "e_total inputs must be in [0,1], got f1={f1} acc={acc}"
        )));
    }
    Ok(0.67 * f1 + 0.33 * acc)
}

pub fn report(cm: ConfusionMatrix) -> Result<MetricReport> {
    let (precision, recall) = precision_recall(&cm);
    let f1 = per_class_f1(&cm)?;
    let macro_f1 = f1.iter().sum::<f64>() / NUM_CLASSES as f64;
    let total_accuracy = total_accuracy(&cm)?;
    let mut support = [0u64; NUM_CLASSES];
    for (c, s) in support.iter_mut().enumerate() {
        *s = cm.support(c);
    }
    Ok(MetricReport {
        e_total: e_total(macro_f1, total_accuracy)?,
        confusion: cm,
        precision,
        recall,
        f1,
        support,
        macro_f1,
        total_accuracy,
    })
}

/// Join a prediction CSV against ground-truth annotations and score it.
///
/// Every valid-labeled frame in the annotations must appear in the prediction
/// file; missing frames are an error (up to 10 are listed).
pub fn evaluate_files(pred_csv: &Path, annotations_root: &Path) -> Result<MetricReport> {
    let records = inference::read_predictions(pred_csv)?;
    let mut predicted: std::collections::HashMap<(String, usize), i64> = records
        .iter()
        .map(|r| ((r.video_id.clone(), r.frame_index), r.predicted_code))
        .collect();

    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    let mut missing: Vec<String> = Vec::new();
    for ann in dataio::load_annotations_root(annotations_root)? {
        for (frame, &code) in ann.labels.iter().enumerate() {
            if code == -1 {
                continue;
            }
            match predicted.remove(&(ann.video_id.clone(), frame)) {
                Some(pred) => {
                    y_true.push(code);
                    y_pred.push(pred);
                }
                None => {
                    if missing.len() < 10 {
                        missing.push(format!("{}:{}", ann.video_id, frame));
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(FerError::Eval(format!(
            "frames missing from predictions: {}",
            missing.join(", ")
        )));
    }
    report(ConfusionMatrix::from_pairs(&y_true, &y_pred)?)
}

impl MetricReport {
    /// Structured text with fixed key names, one `key = value` per line.
    pub fn to_structured_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("macro_f1 = {:.9}\n", self.macro_f1));
        s.push_str(&format!("total_accuracy = {:.9}\n", self.total_accuracy));
        s.push_str(&format!("e_total = {:.9}\n", self.e_total));
        for c in 0..NUM_CLASSES {
            s.push_str(&format!("f1_class_{c} = {:.9}\n", self.f1[c]));
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "class  precision  recall     f1         support")?;
        for c in 0..NUM_CLASSES {
            writeln!(
                f,
                "{c:<6} {:<10.4} {:<10.4} {:<10.4} {}",
                self.precision[c], self.recall[c], self.f1[c], self.support[c]
            )?;
        }
        writeln!(f, "macro_f1       = {:.4}", self.macro_f1)?;
        writeln!(f, "total_accuracy = {:.4}", self.total_accuracy)?;
        write!(f, "e_total        = {:.4}", self.e_total)
    }
}
