//! Named parameter storage shared by every network in the codec.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Which learning rate a parameter trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Transforms, compensation network and the factorized prior.
    Main,
    /// The context model.
    Context,
}

/// Projection applied after every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Constraint {
    None,
    /// Elementwise lower bound, e.g. the GDN bias floor.
    Min(f64),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    groups: Vec<Group>,
    constraints: Vec<Constraint>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: Group, constraint: Constraint) -> ParamId {
        self.tensors.push(value);
        self.names.push(name.into());
        self.groups.push(group);
        self.constraints.push(constraint);
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn constraint(&self, id: ParamId) -> Constraint {
        self.constraints[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape("param set", self.tensors[id.0].shape(), value.shape()));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Applies every parameter's [`Constraint`].
    pub fn project(&mut self) {
        for (t, c) in self.tensors.iter_mut().zip(&self.constraints) {
            if let Constraint::Min(lo) = *c {
                for v in t.data_mut() {
                    if *v < lo {
                        *v = lo;
                    }
                }
            }
        }
    }

    /// FNV-1a over names, shapes and the exact bits of every value.
    pub fn fingerprint(&self, mut h: u64) -> u64 {
        for (t, n) in self.tensors.iter().zip(&self.names) {
            h = fnv1a(h, n.as_bytes());
            for &d in t.shape() {
                h = fnv1a(h, &(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h = fnv1a(h, &v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

pub fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}
