use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

const CHECKPOINT_FORMAT: &str = "numcore-params";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct StoredParams {
    format: String,
    version: u32,
    params: Vec<StoredParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Re-using a name replaces the existing tensor.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
            return ParamId(i);
        }
        let i = self.tensors.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(i)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn to_stored(&self) -> StoredParams {
        StoredParams {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self
                .iter()
                .map(|(_, name, t)| StoredParam {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub(crate) fn from_stored(stored: StoredParams) -> Result<Self> {
        if stored.format != CHECKPOINT_FORMAT {
            return Err(NumError::Checkpoint(format!("unexpected format `{}`", stored.format)));
        }
        if stored.version != CHECKPOINT_VERSION {
            return Err(NumError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                stored.version
            )));
        }
        let mut store = ParamStore::new();
        for p in stored.params {
            let t = Tensor::new(p.shape, p.data)
                .map_err(|e| NumError::Checkpoint(format!("parameter `{}`: {e}", p.name)))?;
            if store.index.contains_key(&p.name) {
                return Err(NumError::Checkpoint(format!("duplicate parameter `{}`", p.name)));
            }
            store.add(p.name, t);
        }
        Ok(store)
    }

    /// Serializes to a JSON document. Floats are written in shortest
    /// round-trip form, so `from_json(to_json(p)) == p` bit for bit.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&self.to_stored()).map_err(|e| NumError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: StoredParams = serde_json::from_str(text).map_err(|e| NumError::Checkpoint(e.to_string()))?;
        Self::from_stored(stored)
    }

    pub fn to_value(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self.to_stored()).map_err(|e| NumError::Checkpoint(e.to_string()))
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let stored: StoredParams = serde_json::from_value(value).map_err(|e| NumError::Checkpoint(e.to_string()))?;
        Self::from_stored(stored)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Gradients for every parameter of a [`ParamStore`], aligned by [`ParamId`].
/// Parameters that did not take part in the computation get zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub(crate) fn new(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// Zeroes the gradient of one parameter (used to freeze it).
    pub fn zero(&mut self, id: ParamId) {
        for v in self.grads[id.0].data_mut() {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::matrix(2, 2, vec![0.1, -1.0 / 3.0, 1e-300, 7.0]).unwrap());
        store.add("b", Tensor::vector(vec![std::f64::consts::PI]).unwrap());
        let back = ParamStore::from_json(&store.to_json().unwrap()).unwrap();
        assert_eq!(store, back);
        for ((_, _, a), (_, _, b)) in store.iter().zip(back.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let text = r#"{"format":"numcore-params","version":9,"params":[]}"#;
        assert!(matches!(ParamStore::from_json(text), Err(NumError::Checkpoint(_))));
    }

    #[test]
    fn clip_reduces_norm() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::vector(vec![3.0, 4.0]).unwrap());
        let mut g = Gradients::new(vec![Tensor::vector(vec![3.0, 4.0]).unwrap()]);
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
