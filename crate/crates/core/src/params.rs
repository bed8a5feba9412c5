//! Named parameter storage and per-pass binding of parameters onto a tape.

use std::collections::BTreeMap;

use crate::numerics::{GradTape, Tensor, Var};

/// Model parameters keyed by dotted name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_owned(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Binds parameters from a [`ParamStore`] onto a tape on first use, under a
/// stack of name prefixes.
pub struct Scope<'a> {
    pub tape: &'a mut GradTape,
    store: &'a ParamStore,
    prefix: Vec<String>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a> Scope<'a> {
    /// Parameters are recorded with gradient tracking.
    pub fn trainable(tape: &'a mut GradTape, store: &'a ParamStore, prefix: &str) -> Self {
        Scope { tape, store, prefix: vec![prefix.to_owned()], bound: BTreeMap::new(), trainable: true }
    }

    /// Parameters are recorded as constants.
    pub fn frozen(tape: &'a mut GradTape, store: &'a ParamStore, prefix: &str) -> Self {
        Scope { tape, store, prefix: vec![prefix.to_owned()], bound: BTreeMap::new(), trainable: false }
    }

    pub fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.concat();
        s.push_str(name);
        s
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.get(&self.full_name(name)).is_some()
    }

    /// Tape handle of parameter `name` under the current prefix.
    ///
    /// Panics when the parameter is absent; stores are validated against the
    /// model layout before any forward pass.
    pub fn p(&mut self, name: &str) -> Var {
        let full = self.full_name(name);
        if let Some(v) = self.bound.get(&full) {
            return *v;
        }
        let t = self
            .store
            .get(&full)
            .unwrap_or_else(|| panic!("parameter {full} missing from store"))
            .clone();
        let v = if self.trainable { self.tape.param(t) } else { self.tape.constant(t) };
        self.bound.insert(full, v);
        v
    }

    /// Runs `f` with `pfx` appended to the name prefix.
    pub fn nested<R>(&mut self, pfx: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(pfx.to_owned());
        let r = f(self);
        self.prefix.pop();
        r
    }

    /// Gradients of every bound parameter after `backward`; parameters that
    /// received no gradient map to zeros.
    pub fn grads(&self) -> BTreeMap<String, Vec<f32>> {
        self.bound
            .iter()
            .map(|(name, v)| {
                let g = self
                    .tape
                    .grad(*v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.tape.value(*v).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}
