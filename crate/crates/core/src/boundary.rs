//! Percentile boundaries in rescaled log-likelihood space and the
//! bi-boundary loss.
//!
//! Normals should sit in `[B_n, 0]` and anomalies in `[-1, B_a]` with
//! `B_a = B_n - tau`. The loss is a softplus hinge on the violation in each
//! direction, averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryConfig {
    pub alpha: f64,
    pub tau: f64,
    /// Use the printed form of the objective: no normal term, and a softplus
    /// on every anomaly whether or not it violates `B_a`.
    pub literal: bool,
    /// Collapse both boundaries onto `B_n` (single-boundary ablation).
    pub single: bool,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            alpha: 0.01,
            tau: 0.1,
            literal: false,
            single: false,
        }
    }
}

impl BoundaryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::config(format!("alpha = {} outside (0, 0.5)", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("tau = {} outside (0, 1)", self.tau)));
        }
        Ok(())
    }

    /// `B_n - tau`, or `B_n` itself in single-boundary mode.
    pub fn anomaly_boundary(&self, b_n: f64) -> f64 {
        if self.single {
            b_n
        } else {
            b_n - self.tau
        }
    }
}

/// Nearest-rank lower percentile: element `ceil(alpha * N)` (1-based, clamped
/// to `[1, N]`) of the ascending sort.
pub fn normal_boundary(normals: &[f64], alpha: f64) -> Result<f64> {
    if normals.is_empty() {
        return Err(Error::invalid("boundary needs at least one normal likelihood"));
    }
    let mut sorted = normals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((alpha * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLikelihoods {
    pub normals: Vec<f64>,
    pub anomalies: Vec<f64>,
    pub b_n: f64,
    pub b_a: f64,
}

impl BatchLikelihoods {
    /// Boundaries estimated from the normals of this batch.
    pub fn new(normals: Vec<f64>, anomalies: Vec<f64>, cfg: &BoundaryConfig) -> Result<Self> {
        let b_n = normal_boundary(&normals, cfg.alpha)?;
        Ok(BatchLikelihoods {
            normals,
            anomalies,
            b_n,
            b_a: cfg.anomaly_boundary(b_n),
        })
    }

    pub fn with_boundaries(normals: Vec<f64>, anomalies: Vec<f64>, b_n: f64, b_a: f64) -> Self {
        BatchLikelihoods {
            normals,
            anomalies,
            b_n,
            b_a,
        }
    }

    pub fn len(&self) -> usize {
        self.normals.len() + self.anomalies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn bi_boundary_loss(batch: &BatchLikelihoods, literal: bool) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let normal: f64 = if literal {
        0.0
    } else {
        batch.normals.iter().map(|&l| autodiff::softplus(batch.b_n - l)).sum()
    };
    let anomaly: f64 = batch
        .anomalies
        .iter()
        .map(|&l| autodiff::softplus(l - batch.b_a))
        .sum();
    (normal + anomaly) / batch.len() as f64
}

/// Number of normals below `B_n` plus anomalies above `B_a`.
pub fn bi_boundary_count(batch: &BatchLikelihoods) -> usize {
    batch.normals.iter().filter(|&&l| l < batch.b_n).count()
        + batch.anomalies.iter().filter(|&&l| l > batch.b_a).count()
}

/// Tape form of [`bi_boundary_loss`] over a `B x 1` column of rescaled
/// likelihoods. The boundaries are plain numbers, so no gradient reaches the
/// percentile statistic.
pub fn bi_boundary_loss_tape(
    tape: &mut Tape,
    lhat: Var,
    anomalous: &[bool],
    b_n: f64,
    b_a: f64,
    literal: bool,
) -> Result<Var> {
    let rows = anomalous.len();
    if tape.shape(lhat) != [rows, 1] {
        return Err(Error::Shape {
            op: "bi_boundary_loss",
            left: tape.shape(lhat),
            right: [rows, 1],
        });
    }
    if rows == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let a_mask = tape.constant(Tensor::column(anomalous.iter().map(|&a| f64::from(a)).collect()));
    let above = tape.add_scalar(lhat, -b_a);
    let a_term = tape.softplus(above);
    let mut total = tape.mul(a_term, a_mask)?;
    if !literal {
        let n_mask = tape.constant(Tensor::column(anomalous.iter().map(|&a| f64::from(!a)).collect()));
        let neg = tape.neg(lhat);
        let below = tape.add_scalar(neg, b_n);
        let n_term = tape.softplus(below);
        let n_term = tape.mul(n_term, n_mask)?;
        total = tape.add(total, n_term)?;
    }
    let s = tape.sum(total);
    Ok(tape.scale(s, 1.0 / rows as f64))
}
