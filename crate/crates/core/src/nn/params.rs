use indexmap::IndexMap;

use crate::error::{Error, Result};

/// One trainable array plus its Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::shape(format!("shape {shape:?} holds {n} values, got {}", value.len())));
        }
        Ok(Param { shape, first_moment: vec![0.0; n], second_moment: vec![0.0; n], value })
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    pub entries: IndexMap<String, Param>,
    pub step_count: u64,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn total_len(&self) -> usize {
        self.entries.values().map(Param::len).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients { values: self.entries.values().map(|p| vec![0.0; p.len()]).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradients aligned with `ModelParams::entries` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub values: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}
