use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;

/// Confusion-matrix metrics for one positive class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy over all classes; precision, recall and F1 for `positive`.
/// Precision and recall are 0 when their denominators are empty.
pub fn accuracy_recall_f1(preds: &[usize], labels: &[usize], positive: usize) -> Result<BinaryMetrics> {
    if preds.is_empty() {
        return Err(Error::Argument("metrics need at least one sample".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fnn, mut correct) = (0, 0, 0, 0);
    for (&p, &y) in preds.iter().zip(labels) {
        correct += usize::from(p == y);
        match (p == positive, y == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fnn);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(BinaryMetrics {
        accuracy: ratio(correct, preds.len()),
        precision,
        recall,
        f1,
    })
}

/// Twice the Mann–Whitney U statistic: `2·#concordant + #tied` pairs.
fn twice_u(scores: &[f64], positive: &[bool]) -> u128 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut negatives_below: u128 = 0;
    let mut total: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| positive[k]).count() as u128;
        let neg = (j - i) as u128 - pos;
        total += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    total
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("AUC scores contain NaN".into()));
    }
    let pos = positive.iter().filter(|&&p| p).count() as u128;
    let neg = positive.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative samples".into()));
    }
    Ok(twice_u(scores, positive) as f64 / (2 * pos * neg) as f64)
}

/// Unweighted mean of one-vs-rest AUCs; `scores[i][c]` scores sample `i` for class `c`.
pub fn auc_macro(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Argument(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let classes = scores[0].len();
    if scores.iter().any(|r| r.len() != classes) {
        return Err(Error::Argument("score rows differ in length".into()));
    }
    let mut total = 0.0;
    for c in 0..classes {
        let column: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let is_c: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        total += auc_binary(&column, &is_c)
            .map_err(|_| Error::UndefinedMetric(format!("class {c} is absent or alone")))?;
    }
    Ok(total / classes as f64)
}

/// Bag-level classification summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Binary AUC for two classes, macro AUC otherwise; absent when undefined.
    pub auc: Option<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub n_samples: usize,
    pub loss: Option<f64>,
}

/// Metrics from per-sample class probabilities.
pub fn metrics_report(probs: &[Vec<f64>], labels: &[usize]) -> Result<MetricsReport> {
    if probs.is_empty() {
        return Err(Error::Argument("metrics need at least one sample".into()));
    }
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let classes = probs[0].len();
    let mut recall = Vec::with_capacity(classes);
    let mut f1 = Vec::with_capacity(classes);
    let mut accuracy = 0.0;
    for c in 0..classes {
        let m = accuracy_recall_f1(&preds, labels, c)?;
        accuracy = m.accuracy;
        recall.push(m.recall);
        f1.push(m.f1);
    }
    let auc = if classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        auc_binary(&scores, &positive).ok()
    } else {
        auc_macro(probs, labels).ok()
    };
    let loss = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / probs.len() as f64;
    Ok(MetricsReport {
        accuracy,
        auc,
        recall,
        f1,
        n_samples: probs.len(),
        loss: Some(loss),
    })
}
