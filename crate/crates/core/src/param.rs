//! Trainable parameters and the visitor used to enumerate them.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A tensor owned by a model and updated by an optimizer.
///
/// Cloning keeps the id; deserializing assigns a fresh one.
#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    value: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param {
            id: ParamId::fresh(),
            value: value.with_requires_grad(true),
        }
    }

    /// Kaiming-uniform fan-in initialisation: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Self::new(Tensor::rand_uniform(shape, -bound, bound, rng))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::new(Tensor::ones(shape))
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn set(&mut self, value: Tensor) {
        debug_assert_eq!(value.shape(), self.value.shape());
        self.value = value.with_requires_grad(true);
    }

    pub fn fill(&mut self, v: f64) {
        self.value.data_mut().iter_mut().for_each(|x| *x = v);
    }
}

impl Serialize for Param {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.value.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Param {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Tensor::deserialize(d).map(Param::new)
    }
}

/// Anything that owns parameters, visited in a fixed order.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value().numel());
        n
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.iter().for_each(|t| t.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(|t| t.visit_mut(f));
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(t) = self {
            t.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(t) = self {
            t.visit_mut(f);
        }
    }
}

impl Parameterized for Param {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(self)
    }
}
