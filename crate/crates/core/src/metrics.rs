//! Classification metrics: accuracy, rank-based AUROC and F1.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Accuracy, AUROC and F1. `auroc` is `None` when the labels hold a single
/// class, where the rank statistic is undefined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub f1: f64,
}

/// Mann–Whitney AUROC from scores and binary labels, ties counted as 1/2.
/// `None` when either class is absent.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positive.len() {
        return Err(invalid("auroc: scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("auroc: NaN score"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mid-ranks for tied groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n)))
}

fn f1_for(pred: &[usize], labels: &[usize], class: usize) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &y) in pred.iter().zip(labels) {
        match (p == class, y == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn argmax<'a>(row: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &v) in row.enumerate() {
        if v > best.1 || j == 0 {
            best = (j, v);
        }
    }
    best.0
}

/// Metrics from per-trial class scores (`B × C`, one row per trial).
/// Binary: AUROC on the class-1 score and F1 for class 1. Multi-class:
/// one-vs-rest macro AUROC and macro F1.
pub fn compute_metrics(scores: &DMatrix<f64>, labels: &[usize]) -> Result<Metrics> {
    let (b, c) = scores.shape();
    if b == 0 {
        return Err(invalid("metrics: empty dataset"));
    }
    if labels.len() != b {
        return Err(invalid("metrics: one label per score row required"));
    }
    if c == 0 || labels.iter().any(|&y| y >= c) {
        return Err(invalid("metrics: label out of range"));
    }
    let pred: Vec<usize> = scores.row_iter().map(|r| argmax(r.iter())).collect();
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    let accuracy = correct as f64 / b as f64;

    let (auroc, f1) = if c <= 2 {
        let s: Vec<f64> = (0..b).map(|i| if c == 2 { scores[(i, 1)] } else { 0.0 }).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        (auroc_binary(&s, &pos)?, f1_for(&pred, labels, 1))
    } else {
        let mut sum = 0.0;
        let mut used = 0;
        for k in 0..c {
            let s: Vec<f64> = scores.column(k).iter().copied().collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            if let Some(a) = auroc_binary(&s, &pos)? {
                sum += a;
                used += 1;
            }
        }
        let auroc = (used > 0).then(|| sum / used as f64);
        let f1 = (0..c).map(|k| f1_for(&pred, labels, k)).sum::<f64>() / c as f64;
        (auroc, f1)
    };
    if auroc.is_none() {
        log::warn!("AUROC undefined: evaluation labels contain a single class");
    }
    Ok(Metrics { accuracy, auroc, f1 })
}
