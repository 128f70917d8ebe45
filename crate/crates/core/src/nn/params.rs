use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named trainable tensors with their gradients.
#[derive(Clone, Debug)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    step: u64,
}

/// Gradients for every entry of a [`ParamStore`], in entry order.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    pub(crate) grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.grads[id]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum with another gradient set of the same layout.
    pub fn add_assign(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::dim("gradient sets differ in length"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.shape() != b.shape() {
                return Err(Error::dim("gradient shapes differ"));
            }
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + *y;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        if !value.is_finite() {
            return Err(Error::Numeric(format!("initial value of {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.values[self.id(name)?])
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    /// Replace a value, keeping the shape contract.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name)?;
        if self.values[id].shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name}: shape {:?} != {:?}",
                value.shape(),
                self.values[id].shape()
            )));
        }
        self.values[id] = value;
        Ok(())
    }

    pub fn grad(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads[id].as_ref()
    }

    pub fn has_gradients(&self) -> bool {
        self.grads.iter().any(Option::is_some)
    }

    pub fn clear_gradients(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Store (or add to) the gradient of every entry.
    pub fn accumulate(&mut self, grads: Gradients<T>) -> Result<()> {
        if grads.grads.len() != self.values.len() {
            return Err(Error::usage(format!(
                "gradient set has {} entries, store has {}",
                grads.grads.len(),
                self.values.len()
            )));
        }
        for (slot, g) in self.grads.iter_mut().zip(grads.grads) {
            match slot {
                Some(existing) => {
                    for (x, y) in existing.data_mut().iter_mut().zip(g.data()) {
                        *x = *x + *y;
                    }
                }
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn take_gradients(&mut self) -> Vec<Option<Tensor<T>>> {
        std::mem::replace(&mut self.grads, vec![None; self.values.len()])
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Copy with a different element type; gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            index: self.index.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: vec![None; self.values.len()],
            step: self.step,
        }
    }

    /// Hash of names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, value) in self.iter() {
            name.hash(&mut h);
            value.shape().hash(&mut h);
            for x in value.data() {
                x.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
        assert!(s.id("b").is_err());
    }

    #[test]
    fn set_keeps_shape() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.set("a", Tensor::zeros(&[3])).is_err());
        s.set("a", Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(s.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        let f0 = s.fingerprint();
        assert_eq!(f0, s.clone().fingerprint());
        s.value_mut(0).data_mut()[1] = 1e-30;
        assert_ne!(f0, s.fingerprint());
    }
}
