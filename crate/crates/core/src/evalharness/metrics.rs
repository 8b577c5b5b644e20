//! Threshold-free OOD metrics. Scores follow the higher = more OOD
//! convention; ID is the positive class for AUPR-in and TPR.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub tnr_at_tpr95: f64,
    pub auroc: f64,
    pub detection_acc: f64,
    pub aupr_in: f64,
}

impl MetricSet {
    pub fn compute(id_scores: &[f64], ood_scores: &[f64]) -> Result<Self> {
        Ok(Self {
            tnr_at_tpr95: tnr_at_tpr(id_scores, ood_scores, 0.95)?,
            auroc: auroc(id_scores, ood_scores)?,
            detection_acc: detection_accuracy(id_scores, ood_scores)?,
            aupr_in: aupr_in(id_scores, ood_scores)?,
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tnr_at_tpr95, self.auroc, self.detection_acc, self.aupr_in]
    }
}

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(input_err("metric inputs must be non-empty"));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(input_err("metric inputs contain NaN"));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of entries of ascending `s` that are `<= t`.
fn count_le(s: &[f64], t: f64) -> usize {
    s.partition_point(|&v| v <= t)
}

/// P(OOD score > ID score) with ties counted half, via average ranks.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check(id_scores, ood_scores)?;
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&v| (v, false))
        .chain(ood_scores.iter().map(|&v| (v, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * pooled[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (n_in, n_out) = (id_scores.len() as f64, ood_scores.len() as f64);
    Ok((rank_sum - n_out * (n_out + 1.0) / 2.0) / (n_in * n_out))
}

/// Fraction of OOD scores above the smallest threshold that keeps at
/// least `tpr` of the ID scores at or below it.
pub fn tnr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64> {
    check(id_scores, ood_scores)?;
    if !(0.0..=1.0).contains(&tpr) {
        return Err(input_err("tpr must lie in [0, 1]"));
    }
    let id = sorted(id_scores);
    let n = id.len();
    let frac = |k: usize| k as f64 / n as f64;
    let mut k = ((tpr * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && frac(k - 1) >= tpr {
        k -= 1;
    }
    while k < n && frac(k) < tpr {
        k += 1;
    }
    let threshold = id[k - 1];
    let above = ood_scores.iter().filter(|&&v| v > threshold).count();
    Ok(above as f64 / ood_scores.len() as f64)
}

/// `max_t ½(TPR(t) + TNR(t))` over the pooled score values, with
/// `TPR(t) = P(id ≤ t)` and `TNR(t) = P(ood > t)`.
pub fn detection_accuracy(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check(id_scores, ood_scores)?;
    let id = sorted(id_scores);
    let ood = sorted(ood_scores);
    let (n_in, n_out) = (id.len() as f64, ood.len() as f64);
    let mut best: f64 = 0.0;
    for &t in id.iter().chain(&ood) {
        let tpr = count_le(&id, t) as f64 / n_in;
        let tnr = 1.0 - count_le(&ood, t) as f64 / n_out;
        best = best.max(0.5 * (tpr + tnr));
    }
    Ok(best)
}

/// Step-interpolated area under the precision–recall curve with ID as the
/// positive class and ascending score as the ranking.
pub fn aupr_in(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check(id_scores, ood_scores)?;
    let id = sorted(id_scores);
    let ood = sorted(ood_scores);
    let n_in = id.len() as f64;
    let mut thresholds: Vec<f64> = id.iter().chain(&ood).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = count_le(&id, t) as f64;
        let fp = count_le(&ood, t) as f64;
        let recall = tp / n_in;
        if recall > prev_recall {
            area += (recall - prev_recall) * tp / (tp + fp);
            prev_recall = recall;
        }
    }
    Ok(area)
}
