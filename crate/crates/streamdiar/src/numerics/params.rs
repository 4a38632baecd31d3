//! Named parameter tensors with a stable iteration order. Used for model
//! weights, analytic gradients, and optimizer moments alike.

use indexmap::IndexMap;

use super::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: IndexMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }

    /// Zero-valued copy with the same names and shapes.
    pub fn zeros_like(&self) -> Params {
        let mut out = Params::new();
        for (name, t) in &self.map {
            out.insert(name.clone(), t.map(|_| 0.0));
        }
        out
    }
}
