//! Named parameter storage shared by all model components.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter name `{name}`")));
        }
        let value = Tensor::parameter(shape, data)?;
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replaces a parameter's values with a fresh leaf of the same shape.
    pub fn set_data(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if data.len() != p.value.numel() {
            return Err(Error::invalid(
                "param_store",
                format!("`{}` holds {} values, got {}", p.name, p.value.numel(), data.len()),
            ));
        }
        p.value = Tensor::parameter(p.value.shape(), data)?;
        Ok(())
    }

    pub fn zero_grads(&self) {
        self.params.iter().for_each(|p| p.value.zero_grad());
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }
}

pub(crate) fn uniform<T: Element>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect()
}

/// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn fan_in_uniform<T: Element>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<T> {
    uniform(rng, n, (3.0 / fan_in.max(1) as f64).sqrt())
}
