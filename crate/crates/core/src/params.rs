use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Name prefix that marks a parameter as belonging to an adapter module.
pub const ADAPTER_PREFIX: &str = "adapter.";

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Named parameters in insertion order, each flagged trainable or frozen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    entries: IndexMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<S>,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Freezes every parameter outside the adapter namespace and marks
    /// adapter parameters trainable.
    pub fn freeze_base(&mut self) {
        for (name, p) in self.entries.iter_mut() {
            p.trainable = name.starts_with(ADAPTER_PREFIX);
        }
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_base_keys_on_prefix() {
        let mut s = ParamStore::<f64>::new();
        s.insert("enc.w", Tensor::zeros(&[2, 2]), true).unwrap();
        s.insert("adapter.enc.0.w_up", Tensor::zeros(&[2, 3]), false)
            .unwrap();
        s.freeze_base();
        assert!(!s.get("enc.w").unwrap().trainable);
        assert!(s.get("adapter.enc.0.w_up").unwrap().trainable);
        assert_eq!(s.trainable_numel(), 6);
        assert_eq!(s.numel(), 10);
    }

    #[test]
    fn no_adapters_means_nothing_trains() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::zeros(&[3]), true).unwrap();
        s.insert("b", Tensor::zeros(&[3]), true).unwrap();
        s.freeze_base();
        assert_eq!(s.trainable_numel(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::zeros(&[1]), true).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1]), true).is_err());
    }
}
