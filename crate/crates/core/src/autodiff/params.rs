use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub path: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Named model parameters plus the freeze mask.
///
/// Paths are dotted (`layers.3.ffn.w1`). Model structs hold [`ParamId`]s
/// only, so the same model description runs against an `f32` store for
/// training and an `f64` copy for gradient checks.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    params: Vec<Param<S>>,
    by_path: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_path: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<S>, trainable: bool) -> Result<ParamId> {
        let path = path.into();
        if self.by_path.contains_key(&path) {
            return Err(Error::DuplicateParam(path));
        }
        let id = ParamId(self.params.len());
        self.by_path.insert(path.clone(), id);
        self.params.push(Param {
            path,
            value,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.by_path.get(path).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.params[id.0].path
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.trainable).map(|(id, _)| id).collect()
    }

    /// Number of trainable scalars, counted tensor by tensor.
    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    path: p.path.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_path: self.by_path.clone(),
        }
    }

    /// SHA-256 over the path, shape and exact bit pattern of every frozen
    /// parameter, in insertion order.
    pub fn frozen_digest(&self) -> String {
        self.digest(|p| !p.trainable)
    }

    pub fn digest_all(&self) -> String {
        self.digest(|_| true)
    }

    fn digest(&self, keep: impl Fn(&Param<S>) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            h.update(p.path.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            // f32 -> f64 widening is exact, so this is bitwise-faithful.
            for x in p.value.data() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
