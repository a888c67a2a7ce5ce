use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in registration order. Registration order is also the
/// checkpoint order, so it must be deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name `{name}`");
        self.entries.push(Param {
            name,
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count of all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replaces values by name; every incoming tensor must match an existing
    /// parameter's shape.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in values {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if self.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    self.value(id).shape(),
                    t.shape()
                )));
            }
            *self.value_mut(id) = t;
        }
        Ok(())
    }
}

/// Accumulated gradients, one slot per parameter.
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64], scale: f64) {
        match &mut self.slots[id.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += scale * x;
                }
            }
            slot @ None => *slot = Some(g.iter().map(|x| scale * x).collect()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots[id.0].as_deref()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Normal samples with standard deviation `std`, redrawn beyond two deviations.
pub fn truncated_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
