//! Named trainable parameters and their binding onto a graph.

use rand::Rng;

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Graph leaves for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Uniform(-a, a) initialisation with `a = sqrt(1 / fan_in)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let a = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = dims.iter().product();
        let data = (0..n).map(|_| T::c(rng.gen_range(-a..a))).collect();
        self.add(name, Tensor::new(dims, data)?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Names and extents, the identity of a parameter layout.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.iter().map(|(n, t)| (n.to_string(), t.dims().to_vec())).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t)).collect())
    }

    /// Replaces every tensor with one of the same name and extents from
    /// `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks `{name}`")))?;
            if src.dims() != t.dims() {
                return Err(Error::Validation(format!(
                    "`{name}` has dims {:?} in checkpoint, expected {:?}",
                    src.dims(),
                    t.dims()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
