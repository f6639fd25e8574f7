use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Array, Real};
use crate::{Error, Result};

/// Named, ordered collection of trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Array<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Array<T> {
        &mut self.values[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Array<T>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar entries.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Array::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces the value of `name`, checking that the shape is unchanged.
    pub fn set(&mut self, name: &str, value: Array<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Mismatch(format!("unknown parameter {name}")))?;
        if self.values[id].shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: self.values[id].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id] = value;
        Ok(())
    }

    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.data_mut().fill(T::zero());
        }
    }
}

/// Deterministic initializer. Values are drawn in double precision and cast,
/// so a 32-bit and a 64-bit build of the same seed agree up to rounding.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform on `±sqrt(1/fan_in)`.
    pub fn uniform<T: Real>(&mut self, shape: impl Into<Vec<usize>>, fan_in: usize) -> Array<T> {
        let shape = shape.into();
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::of(self.rng.gen_range(-bound..=bound))).collect();
        Array::new(shape, data).expect("length matches shape")
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_bounds_and_determinism() {
        let a: Array<f64> = Init::new(3).uniform(vec![16, 8], 16);
        let b: Array<f64> = Init::new(3).uniform(vec![16, 8], 16);
        assert_eq!(a, b);
        assert!(a.max_abs() <= 0.25);
        let c: Array<f32> = Init::new(3).uniform(vec![16, 8], 16);
        assert_eq!(c, a.cast::<f32>());
    }

    #[test]
    fn store_names() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", Array::zeros(vec![2])).unwrap();
        assert!(s.add("w", Array::zeros(vec![1])).is_err());
        assert_eq!(s.id("w"), Some(w));
        assert!(s.set("w", Array::zeros(vec![3])).is_err());
        assert_eq!(s.n_scalars(), 2);
    }
}
