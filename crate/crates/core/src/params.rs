use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters with per-tensor trainable flags, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.insert(
            name,
            Param {
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries.values_mut().for_each(|p| p.trainable = trainable);
    }

    /// Register `name` on the graph under `prefix + name`.
    pub fn var(&self, g: &mut Graph<T>, prefix: &str, name: &str) -> Result<Var> {
        let p = self.get(name)?;
        Ok(g.param(&format!("{prefix}{name}"), &p.value, p.trainable))
    }

    /// Replace values from `tensors`. Every name must exist and match in
    /// shape; nothing is written unless all entries check out.
    pub fn assign_all(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.check_assign(tensors)?;
        for (name, t) in tensors {
            self.entries.get_mut(name).expect("checked above").value = t.clone();
        }
        Ok(())
    }

    /// Validate an [`assign_all`](Self::assign_all) without writing.
    pub fn check_assign(&self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, t) in tensors {
            let cur = self.value(name)?;
            if cur.shape() != t.shape() {
                return Err(Error::shape(
                    "assign",
                    format!("{name}: stored {:?}, incoming {:?}", cur.shape(), t.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn to_tensor_map(&self) -> BTreeMap<String, Tensor<T>> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.value.clone()))
            .collect()
    }
}

/// Normal(0, std) samples redrawn until they fall within two standard
/// deviations.
pub fn trunc_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}
