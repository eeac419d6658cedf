use std::collections::HashMap;

use crate::error::{Error, Result};

/// A named dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

/// Learnable parameters, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Array)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        if array.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "parameter {name} has non-finite entries"
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, array));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_index(&self, i: usize) -> &Array {
        &self.entries[i].1
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Array {
        &mut self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, a)| (n.clone(), Array::zeros(&a.shape)))
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, a1), (n2, a2))| n1 == n2 && a1.shape == a2.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, a)| a.data.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over every scalar.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, a)| a.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, a) in &mut self.entries {
            a.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += factor * other`; layouts must match.
    pub fn add_scaled(&mut self, other: &ParamStore, factor: f64) {
        debug_assert!(self.same_layout(other));
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.data
                .iter_mut()
                .zip(&b.data)
                .for_each(|(x, y)| *x += factor * y);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_values_finite() {
        let mut p = ParamStore::new();
        p.insert("w", Array::zeros(&[2, 3])).unwrap();
        assert!(p.insert("w", Array::zeros(&[1])).is_err());
        assert!(p
            .insert("nan", Array::new(vec![1], vec![f64::NAN]).unwrap())
            .is_err());
        assert_eq!(p.num_scalars(), 6);
        assert!(Array::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
