//! Named parameter storage shared by the model, the optimizer and checkpoints.

use indexmap::IndexMap;

use super::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State that is saved and restored but never receives gradients
    /// (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamValue {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub kind: ParamKind,
}

impl ParamValue {
    pub fn tensor(&self, requires_grad: bool) -> Tensor {
        let t = Tensor::new(&self.shape, self.data.clone()).expect("stored shape is consistent");
        if requires_grad {
            t.with_grad(true)
        } else {
            t
        }
    }
}

/// Insertion-ordered `name → value` map. Names are block path plus role,
/// e.g. `encoder.stage0.conv.weight`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamValue>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>, kind: ParamKind) -> Result<()> {
        if numel(shape) != data.len() {
            return Err(Error::Config(format!(
                "parameter {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(
            name.to_string(),
            ParamValue {
                shape: shape.to_vec(),
                data,
                kind,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamValue> {
        self.entries.get_mut(name)
    }

    /// Value by name; missing names are a contract violation of the caller.
    pub fn expect(&self, name: &str) -> Result<&ParamValue> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamValue)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Trainable entries only, in registry order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &ParamValue)> {
        self.iter().filter(|(_, v)| v.kind == ParamKind::Trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, v)| v.data.len()).sum()
    }

    /// Names present in one store but not the other, or with different
    /// shapes or kinds. Empty when the layouts match exactly.
    pub fn layout_mismatches(&self, other: &ParamStore) -> Vec<String> {
        let mut bad = Vec::new();
        for (name, v) in self.iter() {
            match other.get(name) {
                None => bad.push(format!("{name} (missing)")),
                Some(o) if o.shape != v.shape || o.kind != v.kind => {
                    bad.push(format!("{name} ({:?} vs {:?})", v.shape, o.shape))
                }
                Some(_) => {}
            }
        }
        for name in other.names() {
            if self.get(name).is_none() {
                bad.push(format!("{name} (unexpected)"));
            }
        }
        bad
    }
}
