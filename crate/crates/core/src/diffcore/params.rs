use std::collections::HashMap;

use crate::scalar::Scalar;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use super::DiffError;

/// Named parameter tensors in stable registration order. The order defines
/// the checkpoint layout and the optimizer state layout.
#[derive(Clone)]
pub struct ParamStore<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<F>) -> Result<(), DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>, DiffError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Result<usize, DiffError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor<F> {
        &self.entries[index].1
    }

    pub fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor<F> {
        &mut self.entries[index].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// A graph plus lazy bindings of store parameters to graph leaves. Forward
/// passes fetch parameters by name; after `backward` the gradients can be
/// collected per store index for the optimizer.
pub struct Tape<'a, F: Scalar> {
    pub graph: Graph<F>,
    store: &'a ParamStore<F>,
    bound: HashMap<usize, Var>,
}

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
        }
    }

    /// Leaf var for a named parameter, inserted once per tape.
    pub fn param(&mut self, name: &str) -> Result<Var, DiffError> {
        let idx = self.store.index_of(name)?;
        if let Some(&var) = self.bound.get(&idx) {
            return Ok(var);
        }
        let var = self.graph.leaf(self.store.tensor_at(idx).clone());
        self.bound.insert(idx, var);
        Ok(var)
    }

    /// Gradient per store index, `None` where the root did not touch the
    /// parameter this pass.
    pub fn collect_grads(&self, grads: &Gradients<F>) -> Vec<Option<Tensor<F>>> {
        let mut out: Vec<Option<Tensor<F>>> = (0..self.store.len()).map(|_| None).collect();
        for (&idx, &var) in &self.bound {
            out[idx] = grads.wrt(var).cloned();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.register("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            store.register("w", Tensor::zeros(&[2, 2])),
            Err(DiffError::DuplicateParam(_))
        ));
    }

    #[test]
    fn tape_binds_each_parameter_once() {
        let mut store = ParamStore::<f64>::new();
        store.register("w", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.param("w").unwrap();
        let b = tape.param("w").unwrap();
        assert_eq!(a, b);
        assert_eq!(tape.graph.len(), 1);
    }

    #[test]
    fn collected_grads_line_up_with_store_order() {
        let mut store = ParamStore::<f64>::new();
        store.register("a", Tensor::scalar(1.5)).unwrap();
        store.register("b", Tensor::scalar(-0.5)).unwrap();
        let mut tape = Tape::new(&store);
        let b = tape.param("b").unwrap();
        let root = tape.graph.scale(b, 4.0);
        let root = tape.graph.sum(root);
        let grads = tape.graph.backward(root).unwrap();
        let collected = tape.collect_grads(&grads);
        assert!(collected[0].is_none());
        assert_eq!(collected[1].as_ref().unwrap().data(), &[4.0]);
    }
}
