//! Named parameter storage shared by the student and teacher encoders.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered list of named arrays. Registration order is the canonical
/// order for checkpoints and optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| if trainable { g.param(v.clone()) } else { g.constant(v.clone()) })
                .collect(),
        )
    }
}

/// Graph handles for a [`ParamSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Seeded parameter initializer.
pub struct Init<'a> {
    pub set: &'a mut ParamSet,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let value = Array::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.set.push(name, value)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.set.push(name, Array::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.set.push(name, Array::ones((rows, cols)))
    }
}
