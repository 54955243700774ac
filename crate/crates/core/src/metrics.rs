//! Ranking and thresholded metrics for imbalanced score sets.
//!
//! Higher scores mean "more anomalous". Labels are 1 for anomalies.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, with runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUROC needs both positive and negative samples"));
    }
    // Walk from the lowest score up, counting negatives strictly below.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    for g in tie_groups(scores).iter().rev() {
        let p = g.iter().filter(|&&i| labels[i] == 1).count();
        let n = g.len() - p;
        wins += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-interpolated area under the precision-recall curve. Equal scores form
/// one threshold.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i] == 1).count();
        tp += p;
        fp += g.len() - p;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        check(scores, labels)?;
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn precision(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// Zero when there are no true positives.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        let (p, r) = (self.precision(), self.recall());
        2.0 * p * r / (p + r)
    }
}

/// F1 when predicting anomalous iff `score >= threshold`.
pub fn f1_at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    Ok(Confusion::at_threshold(scores, labels, threshold)?.f1())
}

/// Threshold used for scorers without a learned boundary.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Score-space image `1 - exp(B_a)` of the anomaly boundary.
pub fn boundary_threshold(b_a: Option<f64>) -> Result<f64> {
    let b_a = b_a.ok_or_else(|| Error::Checkpoint("checkpoint has no anomaly boundary".into()))?;
    if !b_a.is_finite() {
        return Err(Error::Checkpoint(format!("anomaly boundary {b_a} is not finite")));
    }
    Ok(1.0 - b_a.exp())
}

/// Histogram intersection of two samples over `bins` equal bins spanning
/// their joint range. 1 for identical histograms, 0 for disjoint ones.
pub fn overlap_coefficient(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return Err(Error::invalid("overlap needs two nonempty samples and at least one bin"));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(1.0);
    }
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let k = (((x - lo) / (hi - lo)) * bins as f64).floor() as usize;
            h[k.min(bins - 1)] += 1.0 / xs.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    Ok(ha.iter().zip(&hb).map(|(x, y)| x.min(*y)).sum())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
