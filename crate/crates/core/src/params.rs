//! Named parameter tensors and their binding onto a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::linalg::Matrix;

/// Trainable tensors plus non-trainable buffers (power-iteration vectors).
///
/// Names are dotted paths; the first segment groups parameters for the
/// optimizer (`ssm.` parameters can be frozen independently).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
    buffers: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Matrix {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Matrix) {
        self.buffers.insert(name.into(), value);
    }

    pub fn buffer(&self, name: &str) -> &Matrix {
        self.buffers.get(name).unwrap_or_else(|| panic!("unknown buffer `{name}`"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Matrix {
        self.buffers.get_mut(name).unwrap_or_else(|| panic!("unknown buffer `{name}`"))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect();
        Bound { tape, vars }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Binding from variables recorded elsewhere on `tape`.
    pub fn from_vars(tape: &'t Tape, vars: BTreeMap<String, Var<'t>>) -> Self {
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }

    /// Adjoint of every bound parameter, keyed by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.wrt(*v))).collect()
    }
}
