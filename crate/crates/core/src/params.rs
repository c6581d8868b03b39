//! Named parameter tensors. Vectors are stored as `1 × n` matrices so every
//! entry has the same shape algebra.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Array2<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<T>> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Adds `other` entrywise into `self`, creating missing entries.
    pub fn accumulate(&mut self, other: &Self) {
        for (k, v) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(dst) => *dst += v,
                None => {
                    self.tensors.insert(k.clone(), v.clone());
                }
            }
        }
    }

    /// Adds `value` into the entry `name`, creating it if needed.
    pub fn add_into(&mut self, name: &str, value: &Array2<T>) {
        match self.tensors.get_mut(name) {
            Some(dst) => *dst += value,
            None => {
                self.tensors.insert(name.to_string(), value.clone());
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in self.tensors.values_mut() {
            v.mapv_inplace(|x| x * s);
        }
    }

    pub fn l2_norm(&self) -> T {
        self.tensors
            .values()
            .flat_map(|v| v.iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::lit(x.to_f64_lossy()))))
                .collect(),
        }
    }

    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Stable per-name seed so adding tensors never reshuffles the others.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || T::lit(normal.sample(&mut rng)))
}
