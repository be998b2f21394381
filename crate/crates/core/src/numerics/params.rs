use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::Tensor2D;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor2D,
    pub grad: Tensor2D,
    pub trainable: bool,
}

/// Named parameters, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

/// Gradients produced by one backward pass, keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor2D>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D, trainable: bool) {
        let grad = Tensor2D::zeros(value.rows(), value.cols());
        self.entries.insert(
            name.into(),
            Param {
                value,
                grad,
                trainable,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Index(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2D> {
        self.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor2D> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Index(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2D> {
        self.get(name).map(|p| &p.grad)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::Index(format!("unknown parameter `{name}`")))
    }

    /// Sets the trainable flag on every entry.
    pub fn freeze_all(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `grads` into the accumulators of trainable entries; frozen entries
    /// are skipped.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Index(format!("gradient for unknown parameter `{name}`")))?;
            if p.trainable {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Moves every entry of `other` into `self`, prefixing names.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamStore) {
        for (name, p) in other.entries {
            self.entries.insert(format!("{prefix}{name}"), p);
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamStore { entries }
    }

    /// SHA-256 over names, shapes and little-endian value bytes, in name order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        for (name, p) in &other.entries {
            let mine = self
                .entries
                .get(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
            if mine.value.shape() != p.value.shape() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: mine.value.shape(),
                    found: p.value.shape(),
                });
            }
        }
        if let Some(missing) = self.entries.keys().find(|k| !other.entries.contains_key(*k)) {
            return Err(Error::Format(format!("missing parameter `{missing}`")));
        }
        Ok(())
    }

    /// Replaces values from `other` after [`check_layout`](Self::check_layout);
    /// trainable flags are kept.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        for (name, p) in &other.entries {
            if let Some(mine) = self.entries.get_mut(name) {
                mine.value = p.value.clone();
            }
        }
        Ok(())
    }
}
