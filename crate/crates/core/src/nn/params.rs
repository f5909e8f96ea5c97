use std::collections::BTreeMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One named parameter with its optimizer state.
#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> ParamEntry<T> {
    fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self { adam_m: zeros.clone(), adam_v: zeros, value, trainable: false, step_count: 0 }
    }

    /// Clears the first/second moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.adam_m = Tensor::zeros(self.value.shape());
        self.adam_v = Tensor::zeros(self.value.shape());
        self.step_count = 0;
    }
}

/// Ordered, uniquely named parameter store. Insertion order is preserved and
/// is the order used for serialization and parameter accounting.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    /// Adds a frozen parameter with fresh optimizer state.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.entries.insert(name, ParamEntry::new(value));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a value; the new tensor must keep the stored shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self.entry_mut(name)?;
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("`{name}` is {:?}, got {:?}", e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(k, _)| k.as_str())
    }

    /// Marks exactly `names` trainable and freezes everything else.
    pub fn set_trainable<'a>(&mut self, names: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for e in self.entries.values_mut() {
            e.trainable = false;
        }
        for n in names {
            self.entry_mut(n)?.trainable = true;
        }
        Ok(())
    }

    /// Total element count across all entries.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }
}

/// Gradients keyed by parameter name, plus an optional gradient with respect
/// to a designated input tensor.
#[derive(Clone, Debug, Default)]
pub struct GradMap<T> {
    params: BTreeMap<String, Tensor<T>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), input: None }
    }

    /// Adds `grad` into the stored gradient for `name` (inserting if absent).
    pub fn accumulate(&mut self, name: &str, grad: Tensor<T>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(g) => g.add_assign(&grad),
            None => {
                self.params.insert(name.to_string(), grad);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sums another map into this one, key by key.
    pub fn merge(&mut self, other: &GradMap<T>) -> Result<()> {
        for (k, g) in &other.params {
            self.accumulate(k, g.clone())?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for g in self.params.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    /// Checks that each gradient matches its parameter's shape.
    pub fn check_shapes(&self, registry: &ParamRegistry<T>) -> Result<()> {
        for (name, g) in &self.params {
            let p = registry.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "grad_map",
                    format!("`{name}` is {:?} but its gradient is {:?}", p.shape(), g.shape()),
                ));
            }
        }
        Ok(())
    }
}
