use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, trainable tensors.
///
/// Each store carries a process-unique identity so that a tape can route
/// gradients back to the store its leaves were read from. Cloning yields a
/// new identity.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            id: fresh_id(),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: fresh_id(),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    /// Registers a trainable tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad(true));
        Ok(ParamId(id))
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

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters (frozen ones included).
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// `(name, shape)` pairs sorted by name.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut m: Vec<_> = self
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        m.sort();
        m
    }

    /// Sets every trainable gradient to zero (allocating where absent).
    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            if t.requires_grad() {
                t.zero_grad();
            } else {
                t.clear_grad();
            }
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.tensors[id.0].set_requires_grad(trainable);
    }

    /// Freezes or unfreezes everything.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        for t in &mut self.tensors {
            t.set_requires_grad(trainable);
        }
    }

    /// Copies values (not gradients) from a store with an identical manifest.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.manifest() != other.manifest() {
            return Err(Error::Validation("parameter manifests differ".into()));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other.by_name(name).expect("manifest checked");
            self.tensors[i].data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
