use rand::Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::io::NamedTensors;
use crate::tensor::{Graph, Tensor, Var};

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Iteration order is the sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing buffer '{name}'")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing buffer '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Places every parameter on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Parameters followed by buffers, for serialization.
    pub fn to_named(&self) -> NamedTensors<T> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Overwrites values from a named list; names must match exactly
    /// (every parameter and buffer present, shapes equal, nothing extra).
    pub fn load_named(&mut self, named: NamedTensors<T>) -> Result<()> {
        let mut seen = 0;
        for (name, t) in named {
            let slot = match self.params.get_mut(&name) {
                Some(s) => s,
                None => self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("unexpected tensor '{name}' in checkpoint")))?,
            };
            if slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            seen += 1;
        }
        if seen != self.params.len() + self.buffers.len() {
            return Err(Error::Config("checkpoint is missing tensors".into()));
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{name}' not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Rebinds `name` to another node (used to differentiate through a
    /// substituted parameter).
    pub fn replace(&mut self, name: &str, v: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("parameter '{name}' not bound")))?;
        *slot = v;
        Ok(())
    }
}

/// Uniform on `[-limit, limit]` with `limit = sqrt(gain / fan_in)`.
pub fn fan_in_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let limit = (gain / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::lit(rng.random_range(-limit..=limit))).collect(),
    )
    .expect("shape matches")
}
