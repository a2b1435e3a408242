//! Name-indexed parameter registry.
//!
//! Names are hierarchical dotted paths (`decoder.transformer.h.0.attn.c_attn.weight`)
//! and insertion order is preserved, so iteration, serialization and
//! optimizer state all line up by index.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    /// `None` for shape-only ("meta") models.
    pub value: Option<Tensor<T>>,
    pub trainable: bool,
}

impl<T> Param<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], value: Option<Tensor<T>>) {
        let name = name.into();
        if let Some(v) = &value {
            assert_eq!(v.shape(), shape, "parameter {name} shape");
        }
        let prev = self.entries.insert(
            name.clone(),
            Param {
                shape: shape.to_vec(),
                value,
                trainable: true,
            },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.entries.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_meta(&self) -> bool {
        self.entries.values().any(|p| p.value.is_none())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Param<T>) {
        let (k, v) = self.entries.get_index(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> (&str, &mut Param<T>) {
        let (k, v) = self.entries.get_index_mut(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        p.value
            .as_ref()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` has no storage (meta model)")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        p.value
            .as_mut()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` has no storage (meta model)")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn count(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|p| !trainable_only || p.trainable)
            .map(Param::numel)
            .sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            value: p.value.as_ref().map(Tensor::cast),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}
