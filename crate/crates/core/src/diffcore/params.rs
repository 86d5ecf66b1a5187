use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Array;
use crate::error::{Error, Result};

/// What a parameter is used for. Decides L2 treatment during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Weight,
    Bias,
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub role: ParamRole,
    pub value: Array,
}

/// Named trainable arrays, ordered by name so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, role: ParamRole, value: Array) {
        self.params.insert(name.into(), Parameter { role, value });
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn role(&self, name: &str) -> Option<ParamRole> {
        self.params.get(name).map(|p| p.role)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter> {
        self.params.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn size(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Glorot-uniform weight matrix with fan-in `rows` and fan-out `cols`.
    pub fn init_weight<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        self.insert(
            name,
            ParamRole::Weight,
            Array::from_parts(vec![rows, cols], data),
        );
    }

    pub fn init_bias(&mut self, name: &str, len: usize) {
        self.insert(name, ParamRole::Bias, Array::zeros(&[len]));
    }

    /// Names whose shapes differ between `self` and `other`, plus names present
    /// in only one of them.
    pub fn shape_mismatches(&self, other: &ParameterStore) -> Vec<String> {
        let mut out = Vec::new();
        for (name, p) in &self.params {
            match other.params.get(name) {
                Some(q) if q.value.shape() == p.value.shape() => {}
                _ => out.push(name.clone()),
            }
        }
        for name in other.params.keys() {
            if !self.params.contains_key(name) {
                out.push(name.clone());
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

/// Source of named arrays for a forward pass.
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Array>;
}

impl Bindings for ParameterStore {
    fn lookup(&self, name: &str) -> Option<&Array> {
        self.get(name)
    }
}

impl Bindings for HashMap<String, Array> {
    fn lookup(&self, name: &str) -> Option<&Array> {
        self.get(name)
    }
}

impl Bindings for BTreeMap<String, Array> {
    fn lookup(&self, name: &str) -> Option<&Array> {
        self.get(name)
    }
}

/// Two binding sources; the first one wins on name clashes.
pub struct Layered<'a>(pub &'a dyn Bindings, pub &'a dyn Bindings);

impl Bindings for Layered<'_> {
    fn lookup(&self, name: &str) -> Option<&Array> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

/// Convenience for checking that gradients line up with a store.
pub(crate) fn check_same_shape(name: &str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!(
            "parameter `{name}`: shape {:?} vs gradient {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
