//! Classification metrics and the per-epoch curve export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::N_CLASSES;
use crate::error::{Error, Result};

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("no predictions".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= N_CLASSES) {
        return Err(Error::UndefinedMetric(format!("class index {bad} out of range")));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `matrix[true][predicted]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize]) -> Result<[[usize; N_CLASSES]; N_CLASSES]> {
    check_lengths(preds, labels)?;
    let mut m = [[0; N_CLASSES]; N_CLASSES];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Precision, recall and F1 per class; every 0/0 is taken as 0.
pub fn per_class_scores(confusion: &[[usize; N_CLASSES]; N_CLASSES]) -> Vec<ClassScores> {
    (0..N_CLASSES)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

/// Per-class F1 averaged with weights proportional to true-class support.
pub fn weighted_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    let confusion = confusion_matrix(preds, labels)?;
    let total = preds.len() as f64;
    let weighted: f64 = per_class_scores(&confusion)
        .iter()
        .map(|s| s.f1 * s.support as f64)
        .sum();
    Ok(weighted / total)
}

/// One-vs-rest ROC AUC of `scores` against boolean `positive` via the
/// Mann-Whitney rank sum with mid-ranks, so each tie counts ½.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let mid_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if positive[k] {
                pos_rank_sum += mid_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((pos_rank_sum - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Macro average of one-vs-rest AUC over the classes present in `labels`.
/// `probs` holds one `N_CLASSES`-wide row per sample.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "{} probability rows vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut present = [false; N_CLASSES];
    for &l in labels {
        *present.get_mut(l).ok_or_else(|| {
            Error::UndefinedMetric(format!("class index {l} out of range"))
        })? = true;
    }
    let classes: Vec<usize> = (0..N_CLASSES).filter(|&c| present[c]).collect();
    if classes.len() < 2 {
        return Err(Error::UndefinedMetric(
            "macro AUC needs at least two distinct classes".into(),
        ));
    }
    let mut total = 0.0;
    for &c in &classes {
        let scores: Vec<f64> = probs.iter().map(|row| row[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += binary_auc(&scores, &positive)?;
    }
    Ok(total / classes.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_auc: f64,
    /// Mean cross-entropy over the split.
    pub loss: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
}

impl EvalReport {
    pub fn from_predictions(probs: &[Vec<f64>], labels: &[usize], loss: f64) -> Result<Self> {
        let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let confusion = confusion_matrix(&preds, labels)?;
        Ok(EvalReport {
            n_samples: labels.len(),
            accuracy: accuracy(&preds, labels)?,
            weighted_f1: weighted_f1(&preds, labels)?,
            macro_auc: macro_auc(probs, labels)?,
            loss,
            per_class: per_class_scores(&confusion),
            confusion,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub val_auc: f64,
    pub alpha: f64,
    pub beta: f64,
    pub chi: f64,
    /// Wall-clock time of the epoch; the only field not fixed by the seed.
    pub seconds: f64,
}

impl EpochLog {
    /// Equality on every seed-determined field (all but `seconds`).
    pub fn same_numbers(&self, other: &EpochLog) -> bool {
        EpochLog {
            seconds: 0.0,
            ..self.clone()
        } == EpochLog {
            seconds: 0.0,
            ..other.clone()
        }
    }
}

pub const CURVE_HEADER: &str = "epoch,train_loss,val_acc,val_f1,val_auc,alpha,beta,chi,seconds";

pub fn epoch_curve_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            l.epoch, l.train_loss, l.val_acc, l.val_f1, l.val_auc, l.alpha, l.beta, l.chi, l.seconds
        );
    }
    out
}

/// Writes the per-epoch curve as CSV; an empty log writes the header only.
pub fn export_epoch_curve(logs: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, epoch_curve_csv(logs)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_anchors() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn weighted_f1_hand_case() {
        // labels:  0 0 1 1 2 2
        // preds:   0 1 1 1 2 0
        // class 0: tp1 fp1 fn1 -> P .5 R .5 F .5
        // class 1: tp2 fp1 fn0 -> P 2/3 R 1 F .8
        // class 2: tp1 fp0 fn1 -> P 1 R .5 F 2/3
        let labels = [0, 0, 1, 1, 2, 2];
        let preds = [0, 1, 1, 1, 2, 0];
        let expected = (0.5 + 0.8 + 2.0 / 3.0) / 3.0;
        assert!((weighted_f1(&preds, &labels).unwrap() - expected).abs() < 1e-12);
        assert_eq!(weighted_f1(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn absent_class_has_no_weight() {
        // class 3 is predicted but never true: its F1 is 0 with support 0
        let labels = [0, 0, 1];
        let preds = [0, 3, 1];
        let f1 = weighted_f1(&preds, &labels).unwrap();
        let class0 = 2.0 * 1.0 * 0.5 / 1.5;
        assert!((f1 - (2.0 * class0 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn auc_anchors() {
        let probs: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut row = vec![0.0; N_CLASSES];
                row[i % 2] = 1.0;
                row
            })
            .collect();
        assert_eq!(macro_auc(&probs, &[0, 1, 0, 1]).unwrap(), 1.0);

        let flat = vec![vec![1.0 / 7.0; N_CLASSES]; 5];
        assert_eq!(macro_auc(&flat, &[0, 1, 2, 1, 0]).unwrap(), 0.5);
        assert!(matches!(
            macro_auc(&flat, &[3, 3, 3, 3, 3]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn curve_csv_shape() {
        let log = EpochLog {
            epoch: 1,
            train_loss: 1.5,
            val_acc: 0.25,
            val_f1: 0.2,
            val_auc: 0.6,
            alpha: 0.3,
            beta: 0.3,
            chi: 0.4,
            seconds: 0.01,
        };
        let csv = epoch_curve_csv(std::slice::from_ref(&log));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|l| l.split(',').count() == 9));
        assert_eq!(csv, epoch_curve_csv(&[log]));
        assert_eq!(epoch_curve_csv(&[]), format!("{CURVE_HEADER}\n"));
    }
}
