//! Named parameter tensors.

use std::collections::BTreeMap;

use crate::rng::Rng64;
use crate::tensor::Tensor;

/// Ordered map from parameter name to value. Names are dotted paths such as
/// `visual.conv1.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Copies every entry of `other`, overwriting same-named ones.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`, rounded to f32.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng64) {
        let mut t = Tensor::randn(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng);
        t.round_to_f32();
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}
