//! Named model parameters partitioned into layers, with aligned gradient
//! storage and layer-restricted gradient dot products.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifies one parameter tensor: `(layer_id, param_name)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub layer: String,
    pub name: String,
}

impl ParamKey {
    pub fn new(layer: &str, name: &str) -> Self {
        ParamKey {
            layer: layer.to_string(),
            name: name.to_string(),
        }
    }
}

/// Ordered collection of parameter tensors. Insertion order is the canonical
/// order for checkpoints, gradient buffers, and all reductions.
#[derive(Debug, Clone)]
pub struct ParamStore {
    keys: Vec<ParamKey>,
    values: Vec<Tensor>,
    layers: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            keys: Vec::new(),
            values: Vec::new(),
            layers: Vec::new(),
        }
    }

    /// Register a parameter. Layer order follows first appearance.
    pub fn insert(&mut self, layer: &str, name: &str, value: Tensor) {
        debug_assert!(
            self.index_of(layer, name).is_none(),
            "duplicate parameter {layer}.{name}"
        );
        if !self.layers.iter().any(|l| l == layer) {
            self.layers.push(layer.to_string());
        }
        self.keys.push(ParamKey::new(layer, name));
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn keys(&self) -> &[ParamKey] {
        &self.keys
    }

    /// Layer ids in first-appearance order.
    pub fn layer_ids(&self) -> &[String] {
        &self.layers
    }

    pub fn index_of(&self, layer: &str, name: &str) -> Option<usize> {
        self.keys
            .iter()
            .position(|k| k.layer == layer && k.name == name)
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn get(&self, layer: &str, name: &str) -> Option<&Tensor> {
        self.index_of(layer, name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.keys.iter().zip(self.values.iter())
    }

    /// Fresh zero-filled gradient buffers matching this store's layout.
    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            values: self
                .values
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    /// Concatenated little-endian bytes of every tensor in store order.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in &self.values {
            out.extend_from_slice(&t.le_bytes());
        }
        out
    }

    /// Restricted to `layers`, the flat inner product of two gradient sets,
    /// summed in store order.
    pub fn grad_dot(&self, a: &Gradients, b: &Gradients, layers: &LayerSet) -> Result<f64> {
        layers.validate(self)?;
        debug_assert_eq!(a.values.len(), self.keys.len());
        debug_assert_eq!(b.values.len(), self.keys.len());
        let mut acc = 0.0;
        for (i, key) in self.keys.iter().enumerate() {
            if layers.contains(&key.layer) {
                acc += a.values[i].dot(&b.values[i]);
            }
        }
        Ok(acc)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient tensors aligned index-for-index with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) values: Vec<Tensor>,
}

impl Gradients {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|t| t.all_finite())
    }

    /// `self += w * other`, elementwise in index order.
    pub fn axpy(&mut self, w: f64, other: &Gradients) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (dst, src) in self.values.iter_mut().zip(other.values.iter()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.iter()) {
                *d += w * s;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.values {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    /// Flatten the gradients of the selected layers into one vector, in
    /// store order. Used by tests to cross-check dot products.
    pub fn flatten_layers(&self, store: &ParamStore, layers: &LayerSet) -> Result<Vec<f64>> {
        layers.validate(store)?;
        let mut out = Vec::new();
        for (i, key) in store.keys().iter().enumerate() {
            if layers.contains(&key.layer) {
                out.extend_from_slice(self.values[i].data());
            }
        }
        Ok(out)
    }
}

/// A set of layer ids selecting which parameters enter a gradient dot
/// product.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct LayerSet {
    ids: BTreeSet<String>,
}

impl LayerSet {
    pub fn from_ids<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Result<Self> {
        let ids: BTreeSet<String> = ids.into_iter().map(Into::into).collect();
        if ids.is_empty() {
            return Err(Error::Invalid("layer set must be non-empty".into()));
        }
        Ok(LayerSet { ids })
    }

    /// Every layer of the given store.
    pub fn all(store: &ParamStore) -> Self {
        LayerSet {
            ids: store.layer_ids().iter().cloned().collect(),
        }
    }

    pub fn contains(&self, layer: &str) -> bool {
        self.ids.contains(layer)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Error if any id names a layer the store does not have.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        for id in &self.ids {
            if !store.layer_ids().iter().any(|l| l == id) {
                return Err(Error::UnknownLayer(id.clone()));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for LayerSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let ids: Vec<&str> = self.ids.iter().map(|s| s.as_str()).collect();
        write!(f, "{}", ids.join(","))
    }
}
