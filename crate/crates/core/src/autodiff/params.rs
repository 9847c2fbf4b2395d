use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) -> Result<ParamId> {
        if self.lookup.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::Shape(format!(
                "parameter {name}: shape {shape:?} but {} values",
                value.len()
            )));
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.values.push(value);
        self.lookup.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a parameter drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let value = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        self.register(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    /// Overwrites a parameter by name, checking the shape.
    pub fn assign(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.shapes[id.0] != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {:?}, found {shape:?}",
                self.shapes[id.0]
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Flattened copy of every parameter, registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.numel());
        let mut offset = 0;
        for v in &mut self.values {
            let n = v.len();
            v.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Accumulated gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            grads: store.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.grads[id.0].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn duplicate_registration_rejected() {
        let mut store = ParamStore::new();
        store.register("w", vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            store.register("w", vec![2], vec![1.0, 2.0]),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut store = ParamStore::new();
        let w = store.register("w", vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = GradBuffer::zeros_like(&store);
        for _ in 0..2 {
            let tape = Tape::with_params(&store);
            let wv = tape.param(w);
            let root = (wv * wv).sum();
            tape.backward(root).unwrap().accumulate_into(&mut buf);
        }
        assert_eq!(buf.get(w), &[4.0, -8.0]);
    }
}
