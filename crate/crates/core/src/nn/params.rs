use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::util::{mix_seed, name_hash, rng};

/// A named trainable tensor with its gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
}

/// Tape handles of a [`ParamStore`] bound for one forward pass, in store
/// order.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn var(&self, index: usize) -> Var {
        self.0[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(self.params.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn at(&self, index: usize) -> &Parameter<T> {
        &self.params[index]
    }

    pub fn at_mut(&mut self, index: usize) -> &mut Parameter<T> {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on the tape, differentiable or not.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| {
                    if requires_grad {
                        tape.leaf(p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    /// Adds the gradients of a backward pass into the parameters' slots.
    pub fn accumulate(&mut self, grads: &Gradients<T>, bound: &BoundParams) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g)?,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                })
                .collect(),
        }
    }
}

/// He-normal initialization with fan-in scaling. Each parameter draws from
/// its own stream keyed by `(seed, name)`, so a parameter's initial value
/// does not depend on which other parameters a model has.
pub fn he_normal<T: Real>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut r = rng(mix_seed(seed, name_hash(name)));
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut r);
        T::of(z * std)
    })
}
