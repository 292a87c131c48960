use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter takes part in optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained, with weight decay.
    Weight,
    /// Trained, exempt from weight decay (biases, norm gains, embeddings).
    NoDecay,
    /// Not trained by the optimizer (running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }
}

/// Owns every learnable tensor of a model together with its accumulated
/// gradient. Gradients accumulate across calls to [`ParamStore::accumulate`]
/// until [`ParamStore::zero_grad`] is called.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.len()];
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            kind,
            value,
            grad,
        });
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, kind: ParamKind, shape: &[usize]) -> ParamId {
        self.insert(name, kind, Tensor::zeros(shape))
    }

    pub fn filled(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        shape: &[usize],
        value: f64,
    ) -> ParamId {
        self.insert(name, kind, Tensor::full(shape, value))
    }

    /// Glorot-uniform weight with the given fan-in/fan-out.
    pub fn xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.insert(name, ParamKind::Weight, t)
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.insert(name, ParamKind::NoDecay, t)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars, optionally restricted to names with a prefix.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable() && p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * grads[id]` into each parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &ParamGrads, scale: f64) {
        for (id, g) in &grads.entries {
            let p = &mut self.params[id.0];
            for (acc, v) in p.grad.iter_mut().zip(g) {
                *acc += scale * v;
            }
        }
    }

    /// Copies values (not gradients) from `other`, which must have identical
    /// names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), NumericsError> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| NumericsError::MissingParam(p.name.clone()))?;
            if src.value.shape() != p.value.shape() {
                return Err(NumericsError::Shape {
                    op: "copy_values_from",
                    lhs: p.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Gradients of one backward pass, keyed by parameter. Produced by
/// [`super::Tape::param_grads`].
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    pub(crate) entries: Vec<(ParamId, Vec<f64>)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}
