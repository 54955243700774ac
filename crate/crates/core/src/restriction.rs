//! Pseudo-Huber norm and the two-hypersphere restriction losses.
//!
//! Normal representations are kept inside the shell `r_min < n(x) < r_max`;
//! anomalous ones are pushed beyond `r' = r_max + delta_r`. Each violated
//! branch costs `log(1 + e^d) * e^d` where `d` is the signed violation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HypersphereConfig {
    pub r_max: f64,
    pub gamma: f64,
    pub delta_r: f64,
}

impl Default for HypersphereConfig {
    fn default() -> Self {
        HypersphereConfig {
            r_max: 0.4,
            gamma: 0.99,
            delta_r: 0.1,
        }
    }
}

impl HypersphereConfig {
    /// Builds the config whose radii are exactly `(r_min, r_max, r_prime)`.
    pub fn from_radii(r_min: f64, r_max: f64, r_prime: f64) -> Result<Self> {
        let cfg = HypersphereConfig {
            r_max,
            gamma: r_min / r_max,
            delta_r: r_prime - r_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn r_min(&self) -> f64 {
        self.gamma * self.r_max
    }

    pub fn r_prime(&self) -> f64 {
        self.r_max + self.delta_r
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!("gamma = {} outside (0, 1)", self.gamma)));
        }
        if !(self.r_max > 0.0) || !(self.delta_r > 0.0) {
            return Err(Error::config("r_max and delta_r must be positive"));
        }
        Ok(())
    }
}

/// `sqrt(|x|^2 + 1) - 1`.
pub fn pseudo_huber_norm(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    // Same value as sqrt(sq + 1) - 1 without cancellation for small x.
    sq / ((sq + 1.0).sqrt() + 1.0)
}

/// Cost of a violation of size `delta`: `-log_sigmoid(-delta) * e^delta`.
pub fn violation_cost(delta: f64) -> f64 {
    autodiff::softplus(delta) * delta.exp()
}

pub fn loss_normal_at(n: f64, cfg: &HypersphereConfig) -> f64 {
    if n <= cfg.r_min() {
        violation_cost(cfg.r_min() - n)
    } else if n >= cfg.r_max {
        violation_cost(n - cfg.r_max)
    } else {
        0.0
    }
}

pub fn loss_abnormal_at(n: f64, cfg: &HypersphereConfig) -> f64 {
    if n <= cfg.r_prime() {
        violation_cost(cfg.r_prime() - n)
    } else {
        0.0
    }
}

pub fn loss_normal(x: &[f64], cfg: &HypersphereConfig) -> f64 {
    loss_normal_at(pseudo_huber_norm(x), cfg)
}

pub fn loss_abnormal(x: &[f64], cfg: &HypersphereConfig) -> f64 {
    loss_abnormal_at(pseudo_huber_norm(x), cfg)
}

/// Mean restriction loss. Unlabeled samples (`None`) take the normal branch.
pub fn loss_rr(batch: &[(&[f64], Option<u8>)], cfg: &HypersphereConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty restriction batch"));
    }
    let total: f64 = batch
        .iter()
        .map(|(x, y)| match y {
            Some(1) => loss_abnormal(x, cfg),
            _ => loss_normal(x, cfg),
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Row-wise pseudo-Huber norm of a `B x d` matrix, as a `B x 1` column.
pub fn pseudo_huber_tape(tape: &mut Tape, x: Var) -> Var {
    let sq = tape.square(x);
    let s = tape.sum_rows(sq);
    let s1 = tape.add_scalar(s, 1.0);
    let r = tape.sqrt(s1);
    tape.add_scalar(r, -1.0)
}

/// `mask * cost(mask * delta)`: inactive rows see `cost(0)` times zero, so no
/// overflow from a large inactive delta leaks into the gradient.
fn masked_cost(tape: &mut Tape, delta: Var, mask: &[f64]) -> Result<Var> {
    let m = tape.constant(Tensor::column(mask.to_vec()));
    let d = tape.mul(delta, m)?;
    let sp = tape.softplus(d);
    let e = tape.exp(d);
    let c = tape.mul(sp, e)?;
    tape.mul(c, m)
}

/// Per-row restriction loss (`B x 1`) of the representations `x`.
pub fn restriction_terms_tape(
    tape: &mut Tape,
    x: Var,
    anomalous: &[bool],
    cfg: &HypersphereConfig,
) -> Result<Var> {
    let [rows, _] = tape.shape(x);
    if anomalous.len() != rows {
        return Err(Error::Shape {
            op: "restriction",
            left: [rows, 1],
            right: [anomalous.len(), 1],
        });
    }
    let n = pseudo_huber_tape(tape, x);
    let nv = tape.value(n).to_vec();
    let (r_min, r_max, r_prime) = (cfg.r_min(), cfg.r_max, cfg.r_prime());
    let inner: Vec<f64> = nv
        .iter()
        .zip(anomalous)
        .map(|(&v, &a)| f64::from(!a && v <= r_min))
        .collect();
    let outer: Vec<f64> = nv
        .iter()
        .zip(anomalous)
        .map(|(&v, &a)| f64::from(!a && v >= r_max))
        .collect();
    let away: Vec<f64> = nv
        .iter()
        .zip(anomalous)
        .map(|(&v, &a)| f64::from(a && v <= r_prime))
        .collect();

    let neg_n = tape.neg(n);
    let d_in = tape.add_scalar(neg_n, r_min);
    let d_out = tape.add_scalar(n, -r_max);
    let d_away = tape.add_scalar(neg_n, r_prime);
    let a = masked_cost(tape, d_in, &inner)?;
    let b = masked_cost(tape, d_out, &outer)?;
    let c = masked_cost(tape, d_away, &away)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Mean restriction loss over the rows of `x`.
pub fn restriction_loss_tape(
    tape: &mut Tape,
    x: Var,
    anomalous: &[bool],
    cfg: &HypersphereConfig,
) -> Result<Var> {
    let terms = restriction_terms_tape(tape, x, anomalous, cfg)?;
    Ok(tape.mean(terms))
}
