//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Backbone,
    Adapter,
    Decoder,
    /// Classification head used only during pre-training.
    Head,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Backbone => "backbone",
            Role::Adapter => "adapter",
            Role::Decoder => "decoder",
            Role::Head => "head",
        }
    }
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor,
}

/// Insertion-ordered table of named tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

/// Tape variables for every entry of a store, in store order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps variables already on a tape, one per store entry in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: Role, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, role, tensor });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Records every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.entries.iter().map(|e| tape.leaf(&e.tensor)).collect(),
        }
    }

    /// Adds the gradients computed on `tape` into the trainable tensors.
    pub fn collect_grads(&mut self, tape: &Tape, binding: &Binding) {
        for (e, &v) in self.entries.iter_mut().zip(&binding.vars) {
            tape.grad_into(v, &mut e.tensor);
        }
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    /// Sets the trainable flag of every entry from `rule(role)`.
    pub fn set_trainable_by_role(&mut self, rule: impl Fn(Role) -> bool) {
        for e in &mut self.entries {
            e.tensor.set_trainable(rule(e.role));
        }
    }

    pub fn count(&self, filter: impl Fn(&ParamEntry) -> bool) -> usize {
        self.entries.iter().filter(|e| filter(e)).map(|e| e.tensor.len()).sum()
    }

    pub fn total(&self) -> usize {
        self.count(|_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_find_and_duplicates() {
        let mut s = ParamStore::new();
        let a = s.add("a", Role::Backbone, Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let b = s.add("b", Role::Adapter, Tensor::zeros(&[4]).unwrap()).unwrap();
        assert_eq!(s.find("b"), Some(b));
        assert_eq!(s.get(a).len(), 6);
        assert_eq!(s.total(), 10);
        assert_eq!(s.count(|e| e.role == Role::Adapter), 4);
        assert!(matches!(
            s.add("a", Role::Head, Tensor::zeros(&[1]).unwrap()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bind_and_collect_respects_freeze() {
        let mut s = ParamStore::new();
        let a = s
            .add("a", Role::Backbone, Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let b = s
            .add("b", Role::Adapter, Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        s.set_trainable_by_role(|r| r == Role::Adapter);
        let mut tape = Tape::new();
        let bind = s.bind(&mut tape);
        let p = tape.mul(bind.var(a), bind.var(b)).unwrap();
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        s.collect_grads(&tape, &bind);
        assert!(s.get(a).grad().is_none());
        assert_eq!(s.get(b).grad().unwrap(), &[1.0, 2.0]);
    }
}
