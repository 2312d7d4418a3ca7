//! Classification metrics: balanced accuracy, AUROC, AUPR.

use crate::{Error, Result};

/// Metrics of one evaluation run. AUROC/AUPR are binary-task metrics and
/// absent when the dataset does not contain both classes.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub balanced_accuracy: f64,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(labels: &[i32], preds: &[i32], classes: usize) -> Result<f64> {
    if labels.len() != preds.len() || labels.is_empty() {
        return Err(Error::invalid("labels and predictions must match and be non-empty"));
    }
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&l, &p) in labels.iter().zip(preds) {
        let l = l as usize;
        count[l] += 1;
        if l == p as usize {
            hit[l] += 1;
        }
    }
    let mut recalls = Vec::new();
    for k in 0..classes {
        if count[k] > 0 {
            recalls.push(hit[k] as f64 / count[k] as f64);
        }
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Probability that a random positive scores above a random negative,
/// ties counting one half — computed by the rank formula.
pub fn auroc(labels: &[i32], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // midranks
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Area under the precision-recall step function (average precision).
pub fn aupr(labels: &[i32], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        // process score ties as one block so the step function is well defined
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mut block_tp = 0usize;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                block_tp += 1;
            } else {
                fp += 1;
            }
        }
        if block_tp > 0 {
            let precision = (tp + block_tp) as f64 / (tp + block_tp + fp) as f64;
            ap += precision * block_tp as f64 / pos as f64;
        }
        tp += block_tp;
        i = j + 1;
    }
    Some(ap)
}

/// Full report from per-sample scores. For binary tasks `scores` is the
/// positive-class probability; predictions are argmax over `probs`.
pub fn report(labels: &[i32], preds: &[i32], pos_scores: Option<&[f64]>, classes: usize) -> Result<MetricReport> {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&l, &p) in labels.iter().zip(preds) {
        confusion[l as usize][p as usize] += 1;
    }
    let (auroc_v, aupr_v) = match (classes, pos_scores) {
        (2, Some(s)) => (auroc(labels, s), aupr(labels, s)),
        _ => (None, None),
    };
    Ok(MetricReport {
        balanced_accuracy: balanced_accuracy(labels, preds, classes)?,
        auroc: auroc_v,
        aupr: aupr_v,
        confusion,
    })
}

/// Aggregates per-seed reports into the metrics CSV
/// (`metric,mean,std,seed0,seed1,seed2`).
pub fn metrics_csv(reports: &[(u64, MetricReport)]) -> String {
    let mut out = String::from("metric,mean,std");
    for (seed, _) in reports {
        out.push_str(&format!(",seed{seed}"));
    }
    out.push('\n');
    let rows: [(&str, fn(&MetricReport) -> Option<f64>); 3] = [
        ("balanced_accuracy", |r| Some(r.balanced_accuracy)),
        ("auroc", |r| r.auroc),
        ("aupr", |r| r.aupr),
    ];
    for (name, get) in rows {
        let vals: Vec<Option<f64>> = reports.iter().map(|(_, r)| get(r)).collect();
        let present: Vec<f64> = vals.iter().flatten().copied().collect();
        if present.is_empty() {
            out.push_str(&format!("{name},absent,absent"));
        } else {
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            let var = present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / present.len() as f64;
            out.push_str(&format!("{name},{mean:.6},{:.6}", var.sqrt()));
        }
        for v in vals {
            match v {
                Some(v) => out.push_str(&format!(",{v:.6}")),
                None => out.push_str(",absent"),
            }
        }
        out.push('\n');
    }
    out
}
