//! Named parameter store shared by the graph, the optimizer, and checkpoints.

use super::{Scalar, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    /// Permanently fixed parameters never receive updates; stages add
    /// further temporary freezes on top via name prefixes.
    pub trainable: bool,
}

/// Registration order is the canonical parameter order: checkpoints, Adam
/// state, and gradient accumulators all index by it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter {name:?} registered twice"
        );
        let id = ParamId(self.params.len());
        self.params.push(Parameter { name: name.to_string(), value, trainable: true });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> ParamId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn maybe_id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<S>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar elements across all parameters.
    pub fn n_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Sum of squared L2 norms, used by the freeze-discipline checks.
    pub fn l2_of_prefix(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.value.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut store = ParamStore::<f32>::new();
        let a = store.register("block.w", Tensor::zeros(2, 3));
        let b = store.register("block.b", Tensor::zeros(1, 3));
        assert_eq!(store.id("block.w"), a);
        assert_eq!(store.id("block.b"), b);
        assert_eq!(store.n_elements(), 9);
        assert!(store.maybe_id("missing").is_none());
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_name_panics() {
        let mut store = ParamStore::<f32>::new();
        store.register("w", Tensor::zeros(1, 1));
        store.register("w", Tensor::zeros(1, 1));
    }
}
