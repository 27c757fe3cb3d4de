//! Partition-tagged parameters and the ordered registry that owns them.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Which of the three parameter groups a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Encoder weights carried over from pretraining.
    Pretrained,
    /// Added lightweight weights (the adapter).
    Lightweight,
    /// Task-specific classification heads.
    Head,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Pretrained, Partition::Lightweight, Partition::Head];

    pub fn tag(self) -> u8 {
        match self {
            Partition::Pretrained => 0,
            Partition::Lightweight => 1,
            Partition::Head => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Partition::Pretrained),
            1 => Some(Partition::Lightweight),
            2 => Some(Partition::Head),
            _ => None,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Pretrained => "pretrained",
            Partition::Lightweight => "lightweight",
            Partition::Head => "head",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    id: String,
    partition: Partition,
    pub value: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor, partition: Partition) -> Self {
        Self {
            id: id.into(),
            partition,
            value,
            trainable: true,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }
}

/// Deep copy of every parameter value in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    values: Vec<(String, Tensor)>,
}

/// Insertion-ordered map from parameter id to [`Parameter`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterRegistry {
    params: IndexMap<String, Parameter>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<()> {
        if self.params.contains_key(param.id()) {
            return Err(Error::Contract(format!("duplicate parameter id `{}`", param.id())));
        }
        self.params.insert(param.id.clone(), param);
        Ok(())
    }

    pub fn add(&mut self, id: impl Into<String>, value: Tensor, partition: Partition) -> Result<()> {
        self.insert(Parameter::new(id, value, partition))
    }

    pub fn remove(&mut self, id: &str) -> Option<Parameter> {
        self.params.shift_remove(id)
    }

    pub fn get(&self, id: &str) -> Option<&Parameter> {
        self.params.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.params.get_mut(id)
    }

    pub fn value(&self, id: &str) -> Result<&Tensor> {
        self.params
            .get(id)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Lookup {
                kind: "parameter",
                id: id.to_string(),
            })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.params.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn partition_of(&self, id: &str) -> Option<Partition> {
        self.params.get(id).map(|p| p.partition)
    }

    /// Marks exactly the parameters in `partitions` as trainable.
    pub fn set_trainable(&mut self, partitions: &[Partition]) {
        for p in self.params.values_mut() {
            p.trainable = partitions.contains(&p.partition);
        }
    }

    /// Scalar count of parameters in `partition`.
    pub fn count(&self, partition: Partition) -> u64 {
        self.params
            .values()
            .filter(|p| p.partition == partition)
            .map(|p| p.value.len() as u64)
            .sum()
    }

    pub fn total_count(&self) -> u64 {
        self.params.values().map(|p| p.value.len() as u64).sum()
    }

    pub fn trainable_count(&self) -> u64 {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len() as u64)
            .sum()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            values: self
                .params
                .values()
                .map(|p| {
                    let mut v = p.value.clone();
                    v.zero_grad();
                    (p.id.clone(), v)
                })
                .collect(),
        }
    }

    /// Restores values saved by [`ParameterRegistry::snapshot`]. The set of ids
    /// must be unchanged.
    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<()> {
        if snapshot.values.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "snapshot holds {} parameters, registry {}",
                snapshot.values.len(),
                self.params.len()
            )));
        }
        for (id, value) in &snapshot.values {
            let p = self.params.get_mut(id).ok_or_else(|| Error::Lookup {
                kind: "parameter",
                id: id.clone(),
            })?;
            if p.value.shape() != value.shape() {
                return Err(Error::shape("restore", format!("{id}: {:?}", value.shape())));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    /// Adds gradients into the parameters' gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = self.params.get_mut(id).ok_or_else(|| Error::Lookup {
                kind: "parameter",
                id: id.to_string(),
            })?;
            p.value.accumulate_grad(g.data())?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.value.zero_grad());
    }

    /// Whether every parameter of `partition` is bit-identical in `other`.
    pub fn partition_bit_eq(&self, other: &ParameterRegistry, partition: Partition) -> bool {
        self.params
            .values()
            .filter(|p| p.partition == partition)
            .all(|p| other.get(&p.id).is_some_and(|q| q.value.bit_eq(&p.value)))
    }

    /// Largest absolute elementwise difference over `partition`; ids missing
    /// from `other` count as infinite.
    pub fn max_abs_diff(&self, other: &ParameterRegistry, partition: Partition) -> f64 {
        self.params
            .values()
            .filter(|p| p.partition == partition)
            .map(|p| match other.get(&p.id) {
                Some(q) if q.value.shape() == p.value.shape() => p.value.max_abs_diff(&q.value),
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &ParameterRegistry) -> bool {
        self.params.len() == other.params.len()
            && self.params.values().zip(other.params.values()).all(|(a, b)| {
                a.id == b.id && a.partition == b.partition && a.value.bit_eq(&b.value)
            })
    }

    /// Copies the values of every id in `partitions` from `source`.
    pub fn copy_from(&mut self, source: &ParameterRegistry, partitions: &[Partition]) -> Result<()> {
        for p in self.params.values_mut() {
            if !partitions.contains(&p.partition) {
                continue;
            }
            let src = source.get(&p.id).ok_or_else(|| Error::Lookup {
                kind: "parameter",
                id: p.id.clone(),
            })?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape("copy_from", format!("{}: {:?}", p.id, src.value.shape())));
            }
            p.value = src.value.clone();
            p.value.zero_grad();
        }
        Ok(())
    }
}
