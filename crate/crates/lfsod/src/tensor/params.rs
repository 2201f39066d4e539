//! Named parameter collection with stable iteration order.

use super::{Tensor, TensorError};
use std::collections::HashMap;

/// Ordered name -> tensor map. Iteration follows insertion order, which is
/// what makes optimizer steps, checkpoints, and parameter counts
/// reproducible run to run. Duplicate names are rejected.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam { name: name.to_string() });
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_insertion_order() {
        let mut ps = ParamSet::new();
        ps.insert("zeta", Tensor::zeros(&[2])).unwrap();
        ps.insert("alpha", Tensor::zeros(&[3])).unwrap();
        ps.insert("mid", Tensor::zeros(&[1])).unwrap();
        let names: Vec<&str> = ps.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["zeta", "alpha", "mid"]);
        assert_eq!(ps.total_scalars(), 6);
    }

    #[test]
    fn duplicate_name_is_error() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[1])).unwrap();
        let err = ps.insert("w", Tensor::zeros(&[1])).unwrap_err();
        assert_eq!(err, TensorError::DuplicateParam { name: "w".into() });
        assert_eq!(ps.len(), 1);
    }

    #[test]
    fn get_mut_edits_in_place() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[2])).unwrap();
        ps.get_mut("w").unwrap().data[1] = 9.0;
        assert_eq!(ps.get("w").unwrap().data, vec![0.0, 9.0]);
        assert!(ps.get("missing").is_none());
    }
}
