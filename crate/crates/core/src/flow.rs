//! Affine coupling flow with exact log-likelihoods, and the `[-1, 0]`
//! rescaling of those likelihoods.
//!
//! Each coupling layer keeps the coordinates selected by its mask and applies
//! `y = x * exp(s) + t` to the rest, where `(s, t)` come from a small network
//! fed with the kept coordinates. Masks alternate between halves.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Scales are `scale_bound * tanh(raw)`.
    pub scale_bound: f64,
    /// Likelihood normalisation constant; `d * log(2 pi)` when absent.
    pub rescale_constant: Option<f64>,
    /// Log-likelihood mapped to 0 by the rescaling; the flow's density
    /// ceiling ([`FlowModel::log_density_ceiling`]) when absent.
    pub rescale_offset: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 4,
            hidden: 32,
            scale_bound: 2.0,
            rescale_constant: None,
            rescale_offset: None,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::config("flow needs at least one layer and one hidden unit"));
        }
        if !(self.scale_bound > 0.0) {
            return Err(Error::config("flow scale_bound must be positive"));
        }
        if let Some(c) = self.rescale_constant {
            if !(c > 0.0) {
                return Err(Error::config(format!("rescale constant {c} must be positive")));
            }
        }
        if self.rescale_offset.is_some_and(|o| !o.is_finite()) {
            return Err(Error::config("rescale offset must be finite"));
        }
        Ok(())
    }

    pub fn rescale_constant_for(&self, dim: usize) -> f64 {
        self.rescale_constant.unwrap_or(dim as f64 * LOG_2PI)
    }
}

#[derive(Clone, Debug)]
pub struct CouplingLayer {
    /// 1 for coordinates passed through unchanged.
    pub mask: Vec<f64>,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    dim: usize,
    hidden: usize,
    scale_bound: f64,
    layers: Vec<CouplingLayer>,
}

/// Layer `f` keeps the first half of the coordinates when `f` is even and
/// the second half when odd.
pub fn alternating_mask(dim: usize, layer: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| f64::from((k < dim / 2) == (layer % 2 == 0)))
        .collect()
}

impl FlowModel {
    /// Registers the flow's parameters. Output layers start at zero, so a
    /// fresh flow is the identity map.
    pub fn new(dim: usize, cfg: &FlowConfig, params: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let masks = (0..cfg.layers).map(|f| alternating_mask(dim, f)).collect();
        Self::with_masks(dim, cfg, masks, params, rng)
    }

    pub fn with_masks(
        dim: usize,
        cfg: &FlowConfig,
        masks: Vec<Vec<f64>>,
        params: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let h = cfg.hidden;
        let layers = masks
            .into_iter()
            .enumerate()
            .map(|(f, mask)| {
                assert_eq!(mask.len(), dim, "mask width");
                CouplingLayer {
                    mask,
                    w1: params.add_glorot(format!("flow.{f}.w1"), dim, h, rng),
                    b1: params.add_zeros(format!("flow.{f}.b1"), 1, h),
                    w2: params.add_zeros(format!("flow.{f}.w2"), h, 2 * dim),
                    b2: params.add_zeros(format!("flow.{f}.b2"), 1, 2 * dim),
                }
            })
            .collect();
        FlowModel {
            dim,
            hidden: h,
            scale_bound: cfg.scale_bound,
            layers,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// Largest log-density the flow can assign to any input: every scale at
    /// `+scale_bound` and `z = 0`.
    pub fn log_density_ceiling(&self) -> f64 {
        let free: f64 = self
            .layers
            .iter()
            .map(|l| l.mask.iter().map(|m| 1.0 - m).sum::<f64>())
            .sum();
        -0.5 * self.dim as f64 * LOG_2PI + self.scale_bound * free
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.w1, l.b1, l.w2, l.b2])
            .collect()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::Shape {
                op: "flow input",
                left: [1, got],
                right: [1, self.dim],
            });
        }
        Ok(())
    }

    /// `z = Phi(x)` and the per-row log-determinant (`B x 1`).
    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let [rows, cols] = tape.shape(x);
        self.check_dim(cols)?;
        let mut y = x;
        let mut log_det = tape.constant(Tensor::zeros(rows, 1));
        for layer in &self.layers {
            let keep = tape.constant(Tensor::row(layer.mask.clone()));
            let free = tape.constant(Tensor::row(layer.mask.iter().map(|m| 1.0 - m).collect()));
            let xm = tape.mul_row(y, keep)?;
            let h = tape.matmul(xm, bound[layer.w1])?;
            let h = tape.add_row(h, bound[layer.b1])?;
            let h = tape.tanh(h);
            let out = tape.matmul(h, bound[layer.w2])?;
            let out = tape.add_row(out, bound[layer.b2])?;
            let raw_s = tape.slice_cols(out, 0, self.dim)?;
            let raw_t = tape.slice_cols(out, self.dim, 2 * self.dim)?;
            let s = tape.tanh(raw_s);
            let s = tape.scale(s, self.scale_bound);
            let s = tape.mul_row(s, free)?;
            let t = tape.mul_row(raw_t, free)?;
            let es = tape.exp(s);
            let ys = tape.mul(y, es)?;
            y = tape.add(ys, t)?;
            let ld = tape.sum_rows(s);
            log_det = tape.add(log_det, ld)?;
        }
        Ok((y, log_det))
    }

    /// Per-row `log p(x)` as a `B x 1` column.
    pub fn log_likelihood_tape(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let (z, log_det) = self.forward_tape(tape, bound, x)?;
        let sq = tape.square(z);
        let ss = tape.sum_rows(sq);
        let half = tape.scale(ss, -0.5);
        let base = tape.add_scalar(half, -0.5 * self.dim as f64 * LOG_2PI);
        tape.add(base, log_det)
    }

    fn coupling(&self, params: &ParamStore, layer: &CouplingLayer, kept: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, h) = (self.dim, self.hidden);
        let w1 = params.get(layer.w1).values();
        let b1 = params.get(layer.b1).values();
        let w2 = params.get(layer.w2).values();
        let b2 = params.get(layer.b2).values();
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let a: f64 = (0..d).map(|k| kept[k] * w1[k * h + j]).sum();
                (a + b1[j]).tanh()
            })
            .collect();
        let out: Vec<f64> = (0..2 * d)
            .map(|c| (0..h).map(|j| hidden[j] * w2[j * 2 * d + c]).sum::<f64>() + b2[c])
            .collect();
        let s = (0..d)
            .map(|k| (1.0 - layer.mask[k]) * self.scale_bound * out[k].tanh())
            .collect();
        let t = (0..d).map(|k| (1.0 - layer.mask[k]) * out[d + k]).collect();
        (s, t)
    }

    fn kept(layer: &CouplingLayer, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&layer.mask).map(|(v, m)| v * m).collect()
    }

    pub fn forward(&self, params: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x.len())?;
        let mut y = x.to_vec();
        let mut log_det = 0.0;
        for layer in &self.layers {
            let (s, t) = self.coupling(params, layer, &Self::kept(layer, &y));
            for k in 0..self.dim {
                y[k] = y[k] * s[k].exp() + t[k];
            }
            log_det += s.iter().sum::<f64>();
        }
        Ok((y, log_det))
    }

    pub fn inverse(&self, params: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z.len())?;
        let mut x = z.to_vec();
        for layer in self.layers.iter().rev() {
            let (s, t) = self.coupling(params, layer, &Self::kept(layer, &x));
            for k in 0..self.dim {
                x[k] = (x[k] - t[k]) * (-s[k]).exp();
            }
        }
        Ok(x)
    }

    pub fn log_likelihood(&self, params: &ParamStore, x: &[f64]) -> Result<f64> {
        let (z, log_det) = self.forward(params, x)?;
        let sq: f64 = z.iter().map(|v| v * v).sum();
        Ok(-0.5 * self.dim as f64 * LOG_2PI - 0.5 * sq + log_det)
    }
}

/// `clamp(l / c, -1, 0)`.
pub fn rescale(l: f64, c: f64) -> f64 {
    (l / c).clamp(-1.0, 0.0)
}

/// `clamp((l - offset) / c, -1, 0)`.
pub fn rescale_shifted(l: f64, offset: f64, c: f64) -> f64 {
    rescale(l - offset, c)
}

pub fn rescale_tape(tape: &mut Tape, ll: Var, offset: f64, c: f64) -> Var {
    let shifted = tape.add_scalar(ll, -offset);
    let r = tape.scale(shifted, 1.0 / c);
    tape.clamp(r, -1.0, 0.0)
}

/// Negative mean log-likelihood over the rows flagged in `normal`.
pub fn ml_loss_tape(tape: &mut Tape, ll: Var, normal: &[bool]) -> Result<Var> {
    let n = normal.iter().filter(|&&b| b).count();
    if n == 0 {
        return Err(Error::invalid("maximum-likelihood loss needs at least one normal sample"));
    }
    if tape.shape(ll) != [normal.len(), 1] {
        return Err(Error::Shape {
            op: "ml_loss",
            left: tape.shape(ll),
            right: [normal.len(), 1],
        });
    }
    let m = tape.constant(Tensor::column(normal.iter().map(|&b| f64::from(b)).collect()));
    let masked = tape.mul(ll, m)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Negative mean log-likelihood of a batch of normal samples.
pub fn ml_loss(flow: &FlowModel, params: &ParamStore, batch: &[Vec<f64>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("maximum-likelihood loss needs at least one normal sample"));
    }
    let mut total = 0.0;
    for x in batch {
        total += flow.log_likelihood(params, x)?;
    }
    Ok(-total / batch.len() as f64)
}

/// Stacks equal-width rows into a matrix.
pub fn stack_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::new(rows.len(), cols, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomised(dim: usize, layers: usize, seed: u64) -> (FlowModel, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cfg = FlowConfig {
            layers,
            hidden: 8,
            ..FlowConfig::default()
        };
        let flow = FlowModel::new(dim, &cfg, &mut params, &mut rng);
        for p in params.iter_mut() {
            for v in p.tensor.values_mut() {
                *v = rng.gen_range(-0.6..0.6);
            }
        }
        (flow, params)
    }

    #[test]
    fn fresh_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamStore::new();
        let flow = FlowModel::new(3, &FlowConfig::default(), &mut params, &mut rng);
        let x = [0.3, -1.2, 2.0];
        let (z, ld) = flow.forward(&params, &x).unwrap();
        assert_eq!(z, x.to_vec());
        assert_eq!(ld, 0.0);
        assert_eq!(flow.inverse(&params, &x).unwrap(), x.to_vec());
        assert!(flow.log_likelihood(&params, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn identity_mode_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamStore::new();
        let flow = FlowModel::new(2, &FlowConfig::default(), &mut params, &mut rng);
        let l = flow.log_likelihood(&params, &[0.0, 0.0]).unwrap();
        assert!((l + 1.837_877_07).abs() < 1e-8);
        let ml = ml_loss(&flow, &params, &[vec![0.0, 0.0]]).unwrap();
        assert!((ml - 1.837_877_07).abs() < 1e-8);
        let x = [0.7, -0.4];
        let closed = -LOG_2PI - 0.5 * (0.49 + 0.16);
        assert!((flow.log_likelihood(&params, &x).unwrap() - closed).abs() < 1e-12);
    }

    #[test]
    fn single_layer_log_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamStore::new();
        let cfg = FlowConfig {
            layers: 1,
            ..FlowConfig::default()
        };
        let flow = FlowModel::with_masks(2, &cfg, vec![vec![1.0, 0.0]], &mut params, &mut rng);
        // tanh(raw) = 0.25 gives s = 0.5 on the free coordinate.
        let b2 = flow.layers()[0].b2;
        params.get_mut(b2).values_mut()[1] = 0.25f64.atanh();
        let (z, ld) = flow.forward(&params, &[1.0, 2.0]).unwrap();
        assert!((ld - 0.5).abs() < 1e-12);
        assert!((z[1] - 2.0 * 0.5f64.exp()).abs() < 1e-12);
        assert_eq!(z[0], 1.0);
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let (flow, params) = randomised(4, 4, 3);
        let rows = vec![vec![0.1, -0.5, 0.9, 0.2], vec![-1.0, 0.3, 0.0, 0.7]];
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = tape.constant(stack_rows(&rows).unwrap());
        let ll = flow.log_likelihood_tape(&mut tape, &b, x).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let plain = flow.log_likelihood(&params, r).unwrap();
            assert!((tape.value(ll)[i] - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn ml_loss_gradient_in_parameters() {
        let (flow, params) = randomised(3, 2, 5);
        let batch = stack_rows(&[vec![0.2, -0.4, 0.8], vec![-0.6, 0.1, 0.3]]).unwrap();
        let w2 = flow.layers()[1].w2;
        let theta = params.get(w2).clone();
        let rep = grad_check(
            |t, v| {
                let mut b = params.bind(t);
                b.replace(w2, v);
                let x = t.constant(batch.clone());
                let ll = flow.log_likelihood_tape(t, &b, x)?;
                ml_loss_tape(t, ll, &[true, true])
            },
            &theta,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn rescale_values() {
        let c = 2.0 * LOG_2PI;
        assert_eq!(rescale(0.0, c), 0.0);
        assert_eq!(rescale(-c, c), -1.0);
        assert_eq!(rescale(-2.0 * c, c), -1.0);
        assert_eq!(rescale(3.0, c), 0.0);
    }

    #[test]
    fn ceiling_bounds_every_density() {
        let (flow, params) = randomised(4, 4, 11);
        // 4 layers, 2 free coordinates each, bound 2.
        let ceiling = flow.log_density_ceiling();
        assert!((ceiling - (-2.0 * LOG_2PI + 16.0)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            assert!(flow.log_likelihood(&params, &x).unwrap() <= ceiling);
        }
    }

    #[test]
    fn shifted_rescale() {
        let c = 4.0 * LOG_2PI;
        assert_eq!(rescale_shifted(3.0, 0.0, c), rescale(3.0, c));
        assert_eq!(rescale_shifted(40.0, 40.0, c), 0.0);
        assert!((rescale_shifted(40.0 - 0.5 * c, 40.0, c) + 0.5).abs() < 1e-12);
        assert_eq!(rescale_shifted(-100.0, 40.0, c), -1.0);
    }

    #[test]
    fn ml_loss_needs_normals() {
        let mut tape = Tape::new();
        let ll = tape.constant(Tensor::column(vec![-1.0]));
        assert!(ml_loss_tape(&mut tape, ll, &[false]).is_err());
    }
}
