use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A named learnable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

/// Flat registry of every learnable tensor of a model, addressed by dotted names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            requires_grad: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_requires_grad(&mut self, prefix: &str, flag: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.requires_grad = flag;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_requires_grad(&mut self, flag: bool) {
        for p in &mut self.params {
            p.requires_grad = flag;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values of every
    /// parameter under `prefix` (empty prefix = whole store).
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Largest absolute gradient entry under `prefix`.
    pub fn max_abs_grad(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.grad.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copies values of every same-named, same-shaped parameter in `other`.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Ok(id) = other.id(&p.name) {
                let src = other.value(id);
                if src.shape() != p.value.shape() {
                    return Err(NnError::Shape {
                        op: "load_values_from",
                        detail: format!("{}: {:?} vs {:?}", p.name, p.value.shape(), src.shape()),
                    });
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}
