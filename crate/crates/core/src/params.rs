//! Named, ordered parameter collections.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters in a fixed registration order. Models keep indices into the
/// set; the order is also the serialization and optimizer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Borrows every parameter onto `tape` as a leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t, trainable)).collect()
    }

    /// Gradients of bound parameters in set order; parameters the sweep did
    /// not reach get zeros.
    pub fn grads(&self, tape: &Tape<'_>, vars: &[Var]) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| {
                tape.grad_slice(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }

    /// FNV-1a over the raw bits of every value, in order.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::binio::Fnv64::new();
        for t in &self.tensors {
            for &x in t.data() {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Replaces every tensor, checking names and shapes against `self`.
    pub fn load_from(&mut self, other: ParamSet) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Format("parameter names differ".into()));
        }
        for (mine, theirs) in self.tensors.iter().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::Shape {
                    op: "load params",
                    lhs: mine.shape().to_vec(),
                    rhs: theirs.shape().to_vec(),
                });
            }
        }
        self.tensors = other.tensors;
        Ok(())
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        Self { names, tensors }
    }
}
