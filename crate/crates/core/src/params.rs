//! Named trainable parameters and their binding onto a tape.

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

/// The tape handles of every parameter for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Substitutes another tape variable for a parameter, e.g. to
    /// differentiate with respect to that parameter alone.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(true);
        self.params.push(NamedParam {
            name: name.into(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform initialised `rows x cols` matrix.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, Tensor::new(rows, cols, values).expect("glorot shape"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone()))
            .collect();
        Bound { vars }
    }

    /// Stores the gradients of a backward pass in each parameter's grad slot.
    pub fn collect_grads(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            grads.write_into(v, &mut p.tensor);
        }
    }

    /// Replaces all values from `other`, which must have identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor.values_mut().copy_from_slice(theirs.tensor.values());
        }
        Ok(())
    }

    /// Flat copy of all values, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.values().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
