//! Named parameter storage.
//!
//! Model structs hold [`ParamId`]s into a [`ParamStore`] rather than tensors.
//! Each forward pass binds the parameters it actually touches onto a fresh
//! tape via [`TapeBinding`]; parameters never bound in a step keep an exactly
//! zero gradient, which is what the subject-isolation contract rests on.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let id = ParamId(self.values.len());
        self.names.push(name.into());
        self.values.push(value.with_grad());
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) {
        debug_assert_eq!(self.values[id.0].shape(), value.shape());
        self.values[id.0] = value.with_grad();
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Lazy mapping from parameters to leaf nodes of one tape.
pub struct TapeBinding {
    node_of: Vec<Option<NodeId>>,
}

impl TapeBinding {
    pub fn new<S: Scalar>(store: &ParamStore<S>) -> Self {
        TapeBinding { node_of: vec![None; store.len()] }
    }

    /// Node for `id` on `tape`, creating the leaf on first use.
    pub fn node<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        id: ParamId,
    ) -> NodeId {
        if let Some(node) = self.node_of[id.0] {
            return node;
        }
        let node = tape.leaf(store.value(id).clone());
        self.node_of[id.0] = Some(node);
        node
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.node_of
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|node| (ParamId(i), node)))
    }
}

/// Per-parameter gradient accumulator, summed across tapes in a fixed order
/// so training steps stay deterministic.
pub struct GradAccumulator<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradAccumulator<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        GradAccumulator { grads: (0..store.len()).map(|_| None).collect() }
    }

    /// Fold the gradients of one tape into the accumulator.
    pub fn absorb(&mut self, binding: &TapeBinding, tape_grads: &Gradients<S>) {
        for (param, node) in binding.bound() {
            if let Some(g) = tape_grads.get(node) {
                match &mut self.grads[param.0] {
                    slot @ None => *slot = Some(g.clone()),
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + b;
                        }
                    }
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, exact zeros when the parameter was never touched.
    pub fn get_or_zeros(&self, store: &ParamStore<S>, id: ParamId) -> Tensor<S> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(store.value(id).shape().to_vec()),
        }
    }

    pub fn grad_norm(&self, id: ParamId) -> f64 {
        self.get(id).map_or(0.0, |g| g.frob_norm())
    }

    pub fn scale(&mut self, factor: f64) {
        let f = S::from_f64(factor);
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * f;
            }
        }
    }
}

/// Shape-checked mismatch error with the offending parameter name.
pub fn expect_shape<S: Scalar>(
    store: &ParamStore<S>,
    id: ParamId,
    shape: &[usize],
) -> Result<()> {
    if store.value(id).shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "param",
            lhs: store.value(id).shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_is_lazy_and_cached() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::scalar(1.0));
        let b = store.add("b", Tensor::scalar(2.0));

        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let na1 = binding.node(&mut tape, &store, a);
        let na2 = binding.node(&mut tape, &store, a);
        assert_eq!(na1, na2);
        assert_eq!(tape.len(), 1);
        assert_eq!(binding.bound().count(), 1);
        let _ = b;
    }

    #[test]
    fn untouched_param_grad_is_exact_zero() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::scalar(3.0));
        let b = store.add("b", Tensor::zeros(vec![2, 2]));

        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let na = binding.node(&mut tape, &store, a);
        let loss = tape.mul(na, na).unwrap();
        let loss = tape.sum(loss).unwrap();
        let grads = tape.backward(loss).unwrap();

        let mut acc = GradAccumulator::new(&store);
        acc.absorb(&binding, &grads);
        assert_eq!(acc.get(a).unwrap().data(), &[6.0]);
        assert!(acc.get(b).is_none());
        assert!(acc.get_or_zeros(&store, b).is_zero());
    }
}
