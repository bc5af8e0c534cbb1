use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Graph, Real, Tensor, Var};
use crate::error::Result;

/// Shape record of one named parameter, used in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Ordered, named set of trainable tensors belonging to one network.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    owner: String,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    frozen: bool,
}

impl<T: Real> ParamStore<T> {
    pub fn new(owner: &str) -> Self {
        Self {
            owner: owner.to_string(),
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: false,
        }
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    /// Appends a parameter and returns its slot index.
    pub fn push(&mut self, name: &str, t: Tensor<T>) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`).
    pub fn push_he<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        self.push_normal(name, shape, std, rng)
    }

    pub fn push_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> usize {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
        self.push(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn push_zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| ParamSpec {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable access for the optimizer and checkpoint loader; refuses when frozen.
    pub(crate) fn tensors_mut(&mut self) -> Result<&mut [Tensor<T>]> {
        if self.frozen {
            return Err(crate::Error::Frozen(self.owner.clone()));
        }
        Ok(&mut self.tensors)
    }

    /// Replaces all weights with `values` (same order and shapes).
    pub fn load(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(crate::Error::Checkpoint(format!(
                "{}: expected {} tensors, got {}",
                self.owner,
                self.tensors.len(),
                values.len()
            )));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&values).enumerate() {
            if old.shape() != new.shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "{}: tensor {} ({}) has shape {:?}, expected {:?}",
                    self.owner,
                    i,
                    self.names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        let dst = self.tensors_mut()?;
        for (d, v) in dst.iter_mut().zip(values) {
            *d = v;
        }
        Ok(())
    }

    /// Registers every tensor in `g`: trainable leaves, or constants when frozen.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                if self.frozen {
                    g.input(t.clone())
                } else {
                    g.param(t.clone())
                }
            })
            .collect()
    }

    /// Same store in another precision (frozen flag kept).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            owner: self.owner.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            frozen: self.frozen,
        }
    }

    /// SHA-256 over names, shapes and little-endian `f32` weights.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update((v.f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
