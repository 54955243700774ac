//! Numeric checks of the two error bounds.
//!
//! The likelihood-space bound relates the mean margin violation of a batch to
//! the boundary gap; the restriction bound relates hypersphere violations to
//! the restriction losses. Both are reported, not enforced.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boundary::{bi_boundary_count, BatchLikelihoods};
use crate::error::{Error, Result};
use crate::flow::LOG_2PI;
use crate::restriction::{loss_abnormal_at, loss_normal_at, pseudo_huber_norm, HypersphereConfig};
use crate::stream::EventSequences;
use crate::trainer::{Checkpoint, Model};

const TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs <= rhs + 1e-9`.
    pub satisfied: bool,
    pub context: BTreeMap<String, f64>,
}

impl BoundReport {
    fn new(name: &str, lhs: f64, rhs: f64, context: BTreeMap<String, f64>) -> Self {
        BoundReport {
            name: name.to_string(),
            lhs,
            rhs,
            satisfied: lhs <= rhs + TOL,
            context,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposition1Report {
    /// Mean margin violation against the final closed-form bound.
    pub bound: BoundReport,
    /// `(B_n - B_a) * count / (N + M) + N / (N + M)`.
    pub intermediate: f64,
    pub intermediate_satisfied: bool,
    /// `(c_n / N)(1 + B_n') + (c_a / M)(-B_a')`, which always dominates the
    /// left-hand side when likelihoods lie in `[-1, 0]`.
    pub count_bound: f64,
    pub count_bound_satisfied: bool,
    /// Normals below `B_n` plus anomalies above `B_a`.
    pub count: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Checks the likelihood-space bound on one batch of rescaled likelihoods
/// with shifted boundaries `B_n' = B_n - eps` and `B_a' = B_a + eps`.
pub fn proposition1_check(batch: &BatchLikelihoods, d: usize, lambda1: f64, eps: f64) -> Result<Proposition1Report> {
    let gap = batch.b_n - batch.b_a;
    if !(eps > 0.0 && eps < gap) {
        return Err(Error::invalid(format!("eps = {eps} must lie in (0, B_n - B_a = {gap})")));
    }
    if !(lambda1 > 0.0) {
        return Err(Error::invalid("lambda1 must be positive"));
    }
    if batch.normals.is_empty() {
        return Err(Error::invalid("bound needs at least one normal likelihood"));
    }
    let (n, m) = (batch.normals.len(), batch.anomalies.len());
    let total = (n + m) as f64;
    let (bn, ba) = (batch.b_n - eps, batch.b_a + eps);

    let lhs = mean(batch.normals.iter().map(|&l| (bn - l).max(0.0)))
        + mean(batch.anomalies.iter().map(|&l| (l - ba).max(0.0)));
    let rhs = (0.5 * d as f64 * LOG_2PI - 0.5) * gap / lambda1 + n as f64 / total;

    let count = bi_boundary_count(batch);
    let intermediate = gap * count as f64 / total + n as f64 / total;
    let c_n = batch.normals.iter().filter(|&&l| l < batch.b_n).count() as f64;
    let c_a = batch.anomalies.iter().filter(|&&l| l > batch.b_a).count() as f64;
    let count_bound = c_n / n as f64 * (1.0 + bn) + if m > 0 { c_a / m as f64 * (-ba) } else { 0.0 };

    let context = BTreeMap::from([
        ("N".to_string(), n as f64),
        ("M".to_string(), m as f64),
        ("d".to_string(), d as f64),
        ("lambda1".to_string(), lambda1),
        ("eps".to_string(), eps),
        ("b_n".to_string(), batch.b_n),
        ("b_a".to_string(), batch.b_a),
    ]);
    Ok(Proposition1Report {
        bound: BoundReport::new("proposition1", lhs, rhs, context),
        intermediate,
        intermediate_satisfied: lhs <= intermediate + TOL,
        count_bound,
        count_bound_satisfied: lhs <= count_bound + TOL,
        count,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseFailure {
    pub index: usize,
    pub norm: f64,
    pub anomalous: bool,
    pub violation: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposition2Report {
    pub bound: BoundReport,
    /// Samples dropped because `n(x) > 1`.
    pub filtered: usize,
    pub checked: usize,
    pub failures: Vec<PointwiseFailure>,
}

/// Hypersphere violation of a sample with norm `n`: two-sided for normals,
/// one-sided (inside `r'`) for anomalies.
pub fn violation(n: f64, anomalous: bool, cfg: &HypersphereConfig) -> f64 {
    if anomalous {
        (cfg.r_prime() - n).max(0.0)
    } else {
        (cfg.r_min() - n).max(0.0) + (n - cfg.r_max).max(0.0)
    }
}

/// Pointwise right-hand side: `(C / log 2) * loss` with
/// `C = max(r_min, 1 - r_max)` for normals and `C = r'` for anomalies.
pub fn pointwise_bound(n: f64, anomalous: bool, cfg: &HypersphereConfig) -> f64 {
    if anomalous {
        cfg.r_prime() / std::f64::consts::LN_2 * loss_abnormal_at(n, cfg)
    } else {
        cfg.r_min().max(1.0 - cfg.r_max) / std::f64::consts::LN_2 * loss_normal_at(n, cfg)
    }
}

/// Checks the restriction bound over `(x, anomalous)` samples with
/// `n(x) <= 1`; others are skipped with a warning.
pub fn proposition2_check(samples: &[(&[f64], bool)], cfg: &HypersphereConfig) -> Result<Proposition2Report> {
    if samples.is_empty() {
        return Err(Error::invalid("restriction bound needs at least one sample"));
    }
    cfg.validate()?;
    let mut filtered = 0;
    let mut failures = Vec::new();
    let (mut viol_n, mut viol_a, mut loss_n, mut loss_a) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, &(x, anomalous)) in samples.iter().enumerate() {
        let n = pseudo_huber_norm(x);
        if n > 1.0 {
            filtered += 1;
            continue;
        }
        let v = violation(n, anomalous, cfg);
        let b = pointwise_bound(n, anomalous, cfg);
        if v > b + TOL {
            failures.push(PointwiseFailure {
                index: i,
                norm: n,
                anomalous,
                violation: v,
                bound: b,
            });
        }
        if anomalous {
            viol_a.push(v);
            loss_a.push(loss_abnormal_at(n, cfg));
        } else {
            viol_n.push(v);
            loss_n.push(loss_normal_at(n, cfg));
        }
    }
    if filtered > 0 {
        log::warn!("{filtered} samples with n(x) > 1 left out of the restriction bound");
    }
    let c_r = cfg.r_min().max(1.0 - cfg.r_max).max(cfg.r_prime());
    let lhs = mean(viol_n.iter().copied()) + mean(viol_a.iter().copied());
    let rhs = c_r / std::f64::consts::LN_2 * (mean(loss_n.iter().copied()) + mean(loss_a.iter().copied()));
    let context = BTreeMap::from([
        ("normals".to_string(), viol_n.len() as f64),
        ("anomalies".to_string(), viol_a.len() as f64),
        ("r_min".to_string(), cfg.r_min()),
        ("r_max".to_string(), cfg.r_max),
        ("r_prime".to_string(), cfg.r_prime()),
        ("c_r".to_string(), c_r),
    ]);
    Ok(Proposition2Report {
        bound: BoundReport::new("proposition2", lhs, rhs, context),
        filtered,
        checked: viol_n.len() + viol_a.len(),
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub events: usize,
    pub proposition1: Proposition1Report,
    pub proposition2: Proposition2Report,
}

/// Runs both checks on a trained model over labelled events, using the
/// checkpoint's boundaries. `eps` defaults to half the boundary gap.
pub fn check_model(
    model: &Model,
    checkpoint: &Checkpoint,
    seqs: &[&EventSequences],
    labels: &[u8],
    eps: Option<f64>,
) -> Result<TheoryReport> {
    if seqs.len() != labels.len() {
        return Err(Error::invalid("one label per event is required"));
    }
    let (Some(b_n), Some(b_a)) = (checkpoint.b_n, checkpoint.b_a) else {
        return Err(Error::Checkpoint("checkpoint carries no boundaries".into()));
    };
    let outs = model.outputs(seqs)?;
    let (mut normals, mut anomalies) = (Vec::new(), Vec::new());
    for (o, &y) in outs.iter().zip(labels) {
        if y == 1 {
            anomalies.push(o.rescaled);
        } else {
            normals.push(o.rescaled);
        }
    }
    let batch = BatchLikelihoods::with_boundaries(normals, anomalies, b_n, b_a);
    let eps = eps.unwrap_or(0.5 * (b_n - b_a));
    let lambda1 = checkpoint.training_config.lambda1;
    let proposition1 = proposition1_check(&batch, model.flow().dim(), lambda1, eps)?;
    let samples: Vec<(&[f64], bool)> = outs.iter().zip(labels).map(|(o, &y)| (o.x.as_slice(), y == 1)).collect();
    let proposition2 = proposition2_check(&samples, &model.config.sphere)?;
    Ok(TheoryReport {
        events: seqs.len(),
        proposition1,
        proposition2,
    })
}
