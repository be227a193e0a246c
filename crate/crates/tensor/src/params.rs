use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter `{name}`")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get_index(&self, index: usize) -> Option<(&str, &Tensor<T>)> {
        self.entries.get_index(index).map(|(k, v)| (k.as_str(), v))
    }

    pub fn get_index_mut(&mut self, index: usize) -> Option<&mut Tensor<T>> {
        self.entries.get_index_mut(index).map(|(_, v)| v)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_len(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.entries.values_mut() {
            let n = t.numel();
            match t.grad_mut() {
                Some(g) => g.iter_mut().for_each(|x| *x = T::zero()),
                None => t.set_grad(Some(vec![T::zero(); n])).expect("length matches"),
            }
        }
    }

    /// Euclidean norm of the gradient of every parameter whose name starts
    /// with `prefix`. Missing gradients count as zero.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// FNV-1a hash over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in self.iter() {
            feed(name.as_bytes());
            for d in t.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for v in t.values() {
                feed(&v.bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_uniqueness() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b", Tensor::zeros(vec![2]).unwrap()).unwrap();
        s.insert("a", Tensor::zeros(vec![3]).unwrap()).unwrap();
        assert!(s.insert("a", Tensor::zeros(vec![1]).unwrap()).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(s.total_len(), 5);
        assert!(s.get("a").unwrap().requires_grad());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(vec![2]).unwrap()).unwrap();
        let before = s.checksum();
        assert_eq!(before, s.clone().checksum());
        s.get_mut("w").unwrap().values_mut()[1] = 1e-7;
        assert_ne!(before, s.checksum());
    }
}
