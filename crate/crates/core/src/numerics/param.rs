use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Ordered collection of parameters addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Total number of scalar entries over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Concatenates every parameter value into one rank-1 tensor.
    pub fn flatten(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect();
        let n = data.len();
        Tensor::from_vec(&[n], data).expect("flat length")
    }

    /// Gradients concatenated in the same order as [`ParamStore::flatten`].
    pub fn flatten_grad(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .params
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect();
        let n = data.len();
        Tensor::from_vec(&[n], data).expect("flat length")
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> T {
        self.params
            .iter()
            .map(|p| p.grad.norm_sq())
            .sum::<T>()
            .sqrt()
    }

    /// Values keyed by name, for serialization.
    pub fn to_named(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites values from a name → tensor map; every parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            let v = named
                .get(&p.name)
                .ok_or_else(|| Error::format(p.name.clone(), "missing parameter"))?;
            if v.shape() != p.value.shape() {
                return Err(Error::format(
                    p.name.clone(),
                    format!(
                        "shape {:?} does not match expected {:?}",
                        v.shape(),
                        p.value.shape()
                    ),
                ));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_is_zero_after_reset() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::ones(&[2, 2]));
        store.get_mut(id).grad.fill(3.0);
        store.zero_grad();
        assert_eq!(store.get(id).grad, Tensor::zeros(&[2, 2]));
        assert_eq!(store.get(id).grad.shape(), store.get(id).value.shape());
    }

    #[test]
    fn load_named_rejects_shape_change() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::ones(&[2]));
        let mut named = store.to_named();
        named.insert("w".into(), Tensor::ones(&[3]));
        assert!(store.load_named(&named).is_err());
    }
}
