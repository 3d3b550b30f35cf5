use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which optimizer owns a parameter during search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Architecture,
}

#[derive(Debug, Clone)]
struct Entry<T: Element> {
    name: String,
    value: Tensor<T>,
    role: ParamRole,
    grad: Option<Tensor<T>>,
}

/// Named registry of trainable tensors and their accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, role: ParamRole) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::contract(format!("parameter {name:?} registered twice")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry { name: name.to_string(), value, role, grad: None });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Returns the existing id for `name`, or registers `init()`.
    pub fn get_or_add(&mut self, name: &str, role: ParamRole, init: impl FnOnce() -> Tensor<T>) -> ParamId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        self.add(name, init(), role).expect("name checked")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.entries[id.0].role
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(TensorError::shape(
                "set_value",
                format!("{}: {:?} -> {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_with_role(&self, role: ParamRole) -> Vec<ParamId> {
        self.ids().filter(|&id| self.role(id) == role).collect()
    }

    /// Element count over parameters, optionally restricted to one role.
    pub fn numel(&self, role: Option<ParamRole>) -> usize {
        self.entries.iter().filter(|e| role.is_none_or(|r| e.role == r)).map(|e| e.value.numel()).sum()
    }

    pub fn var(&self, tape: &Tape<T>, id: ParamId) -> Var<T> {
        tape.param(id, self.value(id))
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, g: Option<Tensor<T>>) {
        self.entries[id.0].grad = g;
    }

    /// Adds every parameter gradient of a sweep into the stored grads.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let e = &mut self.entries[id.0];
            e.grad = Some(match e.grad.take() {
                Some(acc) => acc.zip_map(g, |a, b| a + b).expect("grad shapes match"),
                None => g.clone(),
            });
        }
    }

    /// Ids (in registration order) that currently hold a gradient.
    pub fn ids_with_grad(&self, role: Option<ParamRole>) -> Vec<ParamId> {
        self.ids().filter(|&id| self.grad(id).is_some() && role.is_none_or(|r| self.role(id) == r)).collect()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.grad = None);
    }

    /// Copies values of identically named, identically shaped parameters.
    pub fn copy_matching_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if let Some(&oid) = other.index.get(&e.name) {
                let v = other.value(oid);
                if v.shape() == e.value.shape() {
                    e.value = v.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[2]), ParamRole::Weight).unwrap();
        assert!(s.add("w", Tensor::zeros(&[2]), ParamRole::Weight).is_err());
        let id = s.get_or_add("w", ParamRole::Weight, || panic!("must not re-init"));
        assert_eq!(id, ParamId(0));
    }

    #[test]
    fn shared_param_accumulates_both_uses() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), ParamRole::Weight).unwrap();
        let tape = Tape::new();
        let a = s.var(&tape, id);
        let b = s.var(&tape, id);
        let y = tape.sum_all(&tape.mul(&a, &b).unwrap()).unwrap();
        let g = tape.backward(&y).unwrap();
        s.accumulate(&g);
        assert_eq!(s.grad(id).unwrap().data(), &[2.0, 4.0]);
    }
}
