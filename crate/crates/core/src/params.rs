//! Named parameter storage and per-tape binding.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Backbone weight, never updated.
    Frozen,
    /// Updated by the optimizer.
    Trainable,
    /// Non-trainable state carried in checkpoints (e.g. noise prompts).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Matrix,
    pub role: ParamRole,
}

/// Insertion-ordered map of named matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, role: ParamRole) {
        self.entries.insert(name.into(), ParamEntry { value, role });
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_with_role(&self, role: ParamRole) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.role == role)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Total number of scalar values with the given role.
    pub fn count(&self, role: ParamRole) -> usize {
        self.entries
            .values()
            .filter(|e| e.role == role)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Lazily places parameters of a [`ParamStore`] on a [`Tape`].
///
/// Trainable entries become gradient-carrying leaves; everything else is a
/// constant. Setting `all_constant` turns the binder into an inference
/// binder that never records gradients.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    all_constant: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            all_constant: false,
        }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            all_constant: true,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Var {
        let idx = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"));
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let (_, entry) = self.store.entries.get_index(idx).expect("index");
        let v = if entry.role == ParamRole::Trainable && !self.all_constant {
            tape.param(entry.value.clone())
        } else {
            tape.constant(entry.value.clone())
        };
        self.vars[idx] = Some(v);
        v
    }

    /// Bound variables of trainable entries, by name.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.store
            .entries
            .iter()
            .zip(&self.vars)
            .filter_map(|((name, e), v)| match (e.role, v) {
                (ParamRole::Trainable, Some(v)) => Some((name.clone(), *v)),
                _ => None,
            })
            .collect()
    }
}

/// Gaussian matrix with entries rounded to `f32`, so that checkpoints
/// round-trip initial values exactly.
pub fn gaussian<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols)
        .map(|_| normal.sample(rng) as f32 as f64)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}
