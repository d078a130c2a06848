//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Gradients, Var};
use crate::error::{ImaeError, Result};
use crate::Mat;

/// Parameters keyed by module path, e.g. `encoder.blocks.0.attn.qkv.weight`.
/// Vectors are stored as `[1, n]` matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .ok_or_else(|| ImaeError::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copy every tensor of `other` into `self`, replacing existing entries.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// SHA-256 over names, shapes and little-endian value bytes, in name order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.tensors {
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Truncated normal at two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Glorot/Xavier uniform initialization of a `[fan_in, fan_out]` weight.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a))
}

/// Lazily registers parameters as graph leaves the first time they are used.
pub struct Binder<'a> {
    params: &'a ParamStore,
    bound: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = g.leaf(self.params.require(name)?.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter; unbound parameters are absent.
    pub fn collect(&self, grads: &mut Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.bound {
            if let Some(gm) = grads.take(v) {
                out.insert(name.clone(), gm);
            }
        }
        out
    }
}
