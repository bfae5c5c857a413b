//! Named parameter tensors and their binding onto a tape.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{MaatError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| MaatError::Parameter(format!("no parameter named '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(MaatError::Parameter(format!("no parameter named '{name}'"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters concatenated in insertion order.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self
            .entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect();
        let n = data.len();
        Tensor::new(vec![n], data).expect("flat shape")
    }

    /// Inverse of [`flatten`](Self::flatten) with this store's layout.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamStore> {
        if flat.len() != self.num_scalars() {
            return Err(MaatError::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for (_, t) in out.entries.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// Puts every parameter on `tape`, differentiable when `track` is set.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Result<BoundParams> {
        let mut vars = HashMap::with_capacity(self.entries.len());
        let mut order = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let v = if track {
                tape.param(t.clone())?
            } else {
                tape.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
            order.push(v);
        }
        Ok(BoundParams { vars, order })
    }

    /// Like [`bind`](Self::bind), but parameters are sliced out of one
    /// differentiable flat vector (used for whole-model gradient checks).
    pub fn bind_flat(&self, tape: &mut Tape, flat: Var) -> Result<BoundParams> {
        let mut vars = HashMap::with_capacity(self.entries.len());
        let mut order = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for (name, t) in &self.entries {
            let piece = tape.slice_last(flat, offset, t.len())?;
            let v = tape.reshape(piece, t.shape().to_vec())?;
            offset += t.len();
            vars.insert(name.clone(), v);
            order.push(v);
        }
        Ok(BoundParams { vars, order })
    }
}

/// Parameters placed on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| MaatError::Parameter(format!("no bound parameter named '{name}'")))
    }

    /// Vars in the store's insertion order.
    pub fn ordered(&self) -> &[Var] {
        &self.order
    }

    /// Scoped view that prefixes names with `prefix.`.
    pub fn scope<'a>(&'a self, prefix: &'a str) -> Scope<'a> {
        Scope { params: self, prefix }
    }
}

#[derive(Clone, Copy)]
pub struct Scope<'a> {
    params: &'a BoundParams,
    prefix: &'a str,
}

impl Scope<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params.var(&format!("{}.{}", self.prefix, name))
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
pub fn uniform_fan_in(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("init shape")
}
