use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernels receive the L1/L2 penalties; both kinds are max-norm constrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Kernel,
    Bias,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    /// First and second moment estimates of the optimizer.
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Named network parameters with their optimizer state, in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        self.params.push(Param {
            name,
            kind,
            m: Tensor::zeros_like(&value),
            v: Tensor::zeros_like(&value),
            value,
        });
        Ok(self.params.len() - 1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if value.dims() != self.params[i].value.dims() {
            return Err(Error::shape(format!(
                "parameter {name} has extents {:?}, got {:?}",
                self.params[i].value.dims(),
                value.dims()
            )));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn advance(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces every value, keeping the optimizer state.
    pub fn restore_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.dims() != v.dims() {
                return Err(Error::shape(format!("parameter {} changed extents", p.name)));
            }
            p.value = v;
        }
        Ok(())
    }

    /// Converts the values to another precision; optimizer state restarts.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.kind, p.value.cast())
                .expect("names are unique");
        }
        out
    }
}
