use indexmap::IndexMap;

use super::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub frozen: bool,
}

/// Named parameters in insertion order, each with a frozen flag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Param>,
}

/// Gradients keyed by parameter name. Only trainable parameters appear.
pub type Grads = IndexMap<String, Matrix>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, frozen: bool) {
        self.params.insert(name.into(), Param { value, frozen });
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.params.get(name).map(|p| p.frozen)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.is_frozen(name) == Some(false)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> bool {
        match self.params.get_mut(name) {
            Some(p) => {
                p.frozen = frozen;
                true
            }
            None => false,
        }
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.frozen = true);
    }

    pub fn unfreeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.frozen = false);
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Names of frozen parameters whose bits differ from `other`'s copy.
    pub fn frozen_changes(&self, other: &ParamSet) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.frozen)
            .filter(|(name, p)| other.get(name).is_none_or(|o| !o.bit_eq(&p.value)))
            .map(|(name, _)| name.clone())
            .collect()
    }
}
