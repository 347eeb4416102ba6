//! Named parameter storage shared by every layer of the network.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the optimizer and the checkpoint treat a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Updated by gradient descent.
    Trainable,
    /// Never updated (the frozen encoder stages).
    Frozen,
    /// Non-gradient state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Tensors addressed by dotted names, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) {
        self.entries.insert(name.into(), Entry { value, kind });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::MissingParameter(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::MissingParameter(name.to_owned()))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_of(&self, kind: ParamKind) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |(_, e)| e.kind == kind)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count of tensors of the given kind.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == kind)
            .map(|e| e.value.len())
            .sum()
    }

    /// Move every entry of `other` into `self` under `prefix.`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) {
        for (k, v) in other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v);
        }
    }

    /// Hex SHA-256 over names and values of every tensor of `kind`.
    pub fn digest(&self, kind: ParamKind) -> String {
        let mut h = Sha256::new();
        for (name, e) in self.entries.iter().filter(|(_, e)| e.kind == kind) {
            h.update(name.as_bytes());
            h.update([0u8]);
            e.value.digest_into(&mut h);
        }
        hex_string(&h.finalize())
    }

    /// Per-tensor hex digests, used to see exactly which tensors changed.
    pub fn tensor_digests(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|(k, e)| {
                let mut h = Sha256::new();
                e.value.digest_into(&mut h);
                (k.clone(), hex_string(&h.finalize()))
            })
            .collect()
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// He-normal initialisation for a conv weight of shape `[out, in, k, k]`.
pub(crate) fn kaiming_normal<R: Rng>(rng: &mut R, shape: [usize; 4]) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect())
        .expect("length matches shape")
}

/// PyTorch-style uniform bias init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_bias<R: Rng>(rng: &mut R, out: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_vec(
        [1, out, 1, 1],
        (0..out).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("length matches shape")
}
