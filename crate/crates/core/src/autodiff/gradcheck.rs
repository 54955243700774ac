use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so that components whose true
/// gradient is zero compare on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central finite differences with step `h`.
///
/// The relative error of a component is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |values: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let xt = Tensor::new(x.rows(), x.cols(), values.to_vec())?;
        let v = tape.constant(xt);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let mut leaf = x.clone();
    leaf.set_requires_grad(true);
    let v = tape.leaf(leaf);
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.values().to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = eval(&probe)?;
        probe[i] = orig - h;
        let minus = eval(&probe)?;
        probe[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }

    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max);

    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        tolerance: tol,
        passed: max_rel_error < tol,
    })
}
