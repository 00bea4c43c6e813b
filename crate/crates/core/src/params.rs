//! Named parameter storage shared by the attention layers, the decoder, the
//! optimizer, and the checkpoint format. Registration order is the canonical
//! iteration order everywhere, so updates and checkpoints are reproducible.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{DenseGrid, Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<DenseGrid<S>>,
    lookup: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: DenseGrid<S>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id.0);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// ParamId of the i-th registered tensor.
    pub fn id_at(&self, index: usize) -> ParamId {
        assert!(index < self.values.len());
        ParamId(index)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseGrid<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseGrid<S> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    /// Iterate in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &DenseGrid<S>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn total_elements(&self) -> u64 {
        self.values.iter().map(|v| v.numel() as u64).sum()
    }

    /// Bind every parameter as a differentiable leaf of `graph`, in
    /// registration order.
    pub fn bind_all(&self, graph: &mut Graph<S>) -> Binding {
        Binding { nodes: self.values.iter().map(|v| graph.leaf(v.clone())).collect() }
    }

    /// Replace all values from another store-like list (used by checkpoint
    /// loading); shapes must match exactly.
    pub fn load_values(&mut self, tensors: &[(String, DenseGrid<S>)]) -> Result<()> {
        if tensors.len() != self.values.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.values.len()
            )));
        }
        for (name, value) in tensors {
            let idx = self.lookup.get(name).copied().ok_or_else(|| {
                Error::Format(format!("checkpoint tensor {name} not present in model"))
            })?;
            if self.values[idx].shape() != value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    self.values[idx].shape()
                )));
            }
            self.values[idx] = value.clone();
        }
        Ok(())
    }
}

/// ParamId -> NodeId map for one recorded graph.
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    /// Build a binding from externally created nodes (constants or leaves),
    /// ordered like the store's registration order.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Self { nodes }
    }

    #[inline]
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

/// Uniform Kaiming-style initialization, bound 1/sqrt(fan_in).
pub fn init_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> DenseGrid<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    DenseGrid::from_fn(shape, |_| S::c(rng.gen_range(-bound..bound)))
}

pub fn init_uniform_range<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> DenseGrid<S> {
    DenseGrid::from_fn(shape, |_| S::c(rng.gen_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_is_stable() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("b_second", DenseGrid::zeros(vec![2]));
        let b = store.register("a_first", DenseGrid::zeros(vec![3]));
        let order: Vec<&str> = store.iter().map(|(_, n, _)| n).collect();
        assert_eq!(order, vec!["b_second", "a_first"]);
        assert_eq!(store.by_name("b_second"), Some(a));
        assert_eq!(store.by_name("a_first"), Some(b));
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::<f64>::new();
        store.register("w", DenseGrid::zeros(vec![2, 2]));
        let bad = vec![("w".to_string(), DenseGrid::zeros(vec![3]))];
        assert!(store.load_values(&bad).is_err());
    }
}
