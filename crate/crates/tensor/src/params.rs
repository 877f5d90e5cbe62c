//! Named parameter storage and per-step graph binding.
//!
//! A [`ParamSet`] owns the persistent parameter values of a model. Each
//! training step calls [`ParamSet::bind`] to materialize the parameters as
//! graph leaves, builds a loss over them, runs backward, and hands the leaf
//! gradients to the optimizer. Inference binds with `trainable = false`,
//! which makes every downstream op a cheap forward-only node.

use crate::graph::Tensor;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name}: shape {shape:?} does not match {} values",
            values.len()
        );
        self.entries.push(ParamEntry {
            name,
            shape,
            values,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.entries[id.0].values
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Materializes every parameter as a graph leaf. With `trainable` the
    /// leaves accumulate gradients; otherwise the graph is forward-only.
    pub fn bind(&self, trainable: bool) -> Binding {
        let leaves = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    Tensor::leaf_grad(e.shape.clone(), e.values.clone())
                } else {
                    Tensor::leaf(e.shape.clone(), e.values.clone())
                }
            })
            .collect();
        Binding { leaves }
    }

    /// True if any parameter holds a non-finite value.
    pub fn any_non_finite(&self) -> bool {
        self.entries
            .iter()
            .any(|e| e.values.iter().any(|v| !v.is_finite()))
    }
}

/// Graph leaves for one forward/backward pass, aligned with the originating
/// [`ParamSet`].
pub struct Binding {
    leaves: Vec<Tensor>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.leaves[id.0]
    }

    pub fn leaves(&self) -> &[Tensor] {
        &self.leaves
    }
}

/// Uniform Xavier/Glorot initialization.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect()
}
