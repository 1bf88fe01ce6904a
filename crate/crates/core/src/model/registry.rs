use sha2::{Digest, Sha256};

use crate::tensor::{Real, Tape, Tensor, Var};

/// Where the forward pass gets a [`Var`] for a named parameter.
pub trait ParamSource<T: Real> {
    fn bind(&mut self, tape: &mut Tape<T>, name: &str, tensor: &Tensor<T>) -> Var;
}

/// Binds every parameter as an unnamed leaf.
#[derive(Clone, Copy, Debug, Default)]
pub struct Anonymous;

impl<T: Real> ParamSource<T> for Anonymous {
    fn bind(&mut self, tape: &mut Tape<T>, _name: &str, tensor: &Tensor<T>) -> Var {
        tape.leaf(tensor)
    }
}

/// Binds parameters and remembers the trainable ones by name so their gradients can be
/// collected after `backward`.
#[derive(Debug, Default)]
pub struct Binder {
    pub trainable: Vec<(String, Var)>,
}

impl<T: Real> ParamSource<T> for Binder {
    fn bind(&mut self, tape: &mut Tape<T>, name: &str, tensor: &Tensor<T>) -> Var {
        let v = tape.leaf(tensor);
        if tensor.requires_grad() {
            self.trainable.push((name.to_string(), v));
        }
        v
    }
}

impl Binder {
    /// Var bound for the trainable parameter `name`, if any.
    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.trainable
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// Ordered view of every parameter of a model by hierarchical name. Trainable entries are
/// the ones whose tensor has `requires_grad` set.
pub struct ParameterRegistry<'a, T> {
    entries: Vec<(String, &'a Tensor<T>)>,
}

impl<'a, T: Real> ParameterRegistry<'a, T> {
    pub(crate) fn new(entries: Vec<(String, &'a Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &'a Tensor<T>)> + '_ {
        self.entries.iter().map(|(n, t)| (n.as_str(), *t))
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| *t)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n)
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.iter()
            .filter(|(_, t)| !t.requires_grad())
            .map(|(n, _)| n)
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over name, shape and raw bytes of the entries accepted by `filter`.
    pub fn fingerprint(&self, filter: impl Fn(&str, &Tensor<T>) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(n, t)| filter(n, t)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
