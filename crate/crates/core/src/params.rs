//! Named parameter storage and per-step binding onto a tape.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter in the adapted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Backbone,
    Head { task: usize },
    Adapter,
    Gate { task: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Owns every tensor of a model. Removed slots stay vacant so ids of the
/// remaining parameters never shift.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: Vec<Option<Param>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        self.slots.push(Some(Param {
            name: name.into(),
            kind,
            tensor,
        }));
        ParamId(self.slots.len() - 1)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        matches!(self.slots.get(id.0), Some(Some(_)))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.param(id).tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].as_mut().expect("parameter was removed").tensor
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    pub fn zero_grads(&mut self) {
        for p in self.slots.iter_mut().flatten() {
            p.tensor.zero_grad();
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.tensor.requires_grad())
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| !p.tensor.requires_grad())
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// SHA-256 over the names and value bytes of every frozen tensor.
    pub fn frozen_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, p) in self.iter().filter(|(_, p)| !p.tensor.requires_grad()) {
            hasher.update(p.name.as_bytes());
            hasher.update(p.tensor.value_bytes().collect::<Vec<u8>>());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// A tape plus the parameters bound onto it during one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    tape: Tape,
    bound: HashMap<ParamId, Var>,
    order: Vec<ParamId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf for a stored parameter, created once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.leaf(store.tensor(id));
        self.bound.insert(id, v);
        self.order.push(id);
        v
    }

    /// Parameters bound so far, in binding order.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.order.iter().map(|id| (*id, self.bound[id]))
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Runs backward and adds each bound trainable parameter's gradient into
    /// its tensor. Returns the parameters that received a gradient.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<Vec<ParamId>> {
        self.tape.backward(loss)?;
        let mut touched = Vec::new();
        for &id in &self.order {
            let tensor = store.tensor_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            if let Some(g) = self.tape.grad(self.bound[&id]) {
                tensor.grad_mut().iter_mut().zip(g).for_each(|(o, v)| *o += v);
                touched.push(id);
            }
        }
        Ok(touched)
    }
}

impl Deref for Graph {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removal_keeps_ids_stable() {
        let mut store = ParamStore::new();
        let a = store.insert("a", ParamKind::Adapter, Tensor::scalar(1.0));
        let b = store.insert("b", ParamKind::Adapter, Tensor::scalar(2.0));
        store.remove(a);
        assert!(!store.contains(a));
        assert_eq!(store.tensor(b).values(), &[2.0]);
        assert_eq!(store.iter().count(), 1);
    }

    #[test]
    fn backward_writes_only_trainable_grads() {
        let mut store = ParamStore::new();
        let w = store.insert(
            "w",
            ParamKind::Adapter,
            Tensor::vector(vec![1.0, 2.0]).unwrap().with_requires_grad(true),
        );
        let f = store.insert("f", ParamKind::Backbone, Tensor::vector(vec![3.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let vw = g.param(&store, w);
        let vf = g.param(&store, f);
        assert_eq!(g.param(&store, w), vw);
        let p = g.mul(vw, vf).unwrap();
        let s = g.sum(p).unwrap();
        let touched = g.backward_into(s, &mut store).unwrap();
        assert_eq!(touched, vec![w]);
        assert_eq!(store.tensor(w).grad(), &[3.0, 4.0]);
        assert_eq!(store.tensor(f).grad(), &[0.0, 0.0]);
    }

    #[test]
    fn checksum_ignores_trainable_tensors() {
        let mut store = ParamStore::new();
        let w = store.insert("w", ParamKind::Adapter, Tensor::scalar(1.0).with_requires_grad(true));
        store.insert("f", ParamKind::Backbone, Tensor::scalar(5.0));
        let before = store.frozen_checksum();
        store.tensor_mut(w).values_mut()[0] = 9.0;
        assert_eq!(before, store.frozen_checksum());
        assert_eq!(before.len(), 64);
    }
}
