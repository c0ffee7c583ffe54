//! Named parameter storage and initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Shape, Tensor};

/// Parameters keyed by dotted path (`dec3.srfb.b1.s0.weight`), iterated in
/// lexicographic order so every traversal is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// A store with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.map
            .iter()
            .map(|(k, v)| match other.get(k) {
                Some(o) if o.shape() == v.shape() => v.max_abs_diff(o),
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }

    /// Flat `(name, index)` addressing of every scalar, used for sampling
    /// parameter subsets.
    pub fn scalar_addresses(&self) -> Vec<(String, usize)> {
        self.map
            .iter()
            .flat_map(|(k, v)| (0..v.numel()).map(move |i| (k.clone(), i)))
            .collect()
    }
}

/// He-normal initialization for a convolution weight `cout×cin×k×k`.
pub fn kaiming_normal(shape: Shape, rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape.c * shape.h * shape.w).max(1) as f64;
    let std = (2.0 / fan_in).sqrt();
    normal(shape, std, rng)
}

pub fn normal(shape: Shape, std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("numel matches")
}
