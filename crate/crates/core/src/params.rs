//! Named parameter storage shared by the selector, the classifier and the optimizer.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered list of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph leaves for every parameter of a store, valid for one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Wraps graph leaves that stand in for a store's parameters, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Inserts every parameter into `g` as a variable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.variable(t.clone())).collect() }
    }

    /// Collects per-parameter gradients, zero-filled for parameters the loss does not reach.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, v)| grads.get(*v).map_or_else(|| alloc::vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    }

    /// Replaces values of same-named parameters from `other`; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in other.iter() {
            if let Some(id) = self.id_of(name) {
                if self.tensors[id.0].shape() != t.shape() {
                    return Err(Error::Dimension {
                        op: "load_from",
                        detail: alloc::format!("{name}: {:?} vs {:?}", self.tensors[id.0].shape(), t.shape()),
                    });
                }
                self.tensors[id.0] = t.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

impl ParamStore {
    /// Copies same-named parameters whose shapes agree and returns the names skipped for shape.
    pub fn load_matching(&mut self, other: &ParamStore) -> Vec<String> {
        let mut skipped = Vec::new();
        for (name, t) in other.iter() {
            if let Some(id) = self.id_of(name) {
                if self.tensors[id.0].shape() == t.shape() {
                    self.tensors[id.0] = t.clone();
                } else {
                    skipped.push(name.into());
                }
            }
        }
        skipped
    }
}

/// Normal(0, std) samples redrawn until they fall within two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape product matches sample count")
}
