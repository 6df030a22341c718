use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Named learnable tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`; new names go to the end.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<Bound> {
        let vars = self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars, index: self.index.clone() })
    }

    /// Like [`ParamSet::bind`], but the named parameters use existing
    /// handles and the rest become constants.
    pub fn bind_with(&self, g: &mut Graph<T>, given: &[(&str, Var)]) -> Result<Bound> {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| match given.iter().find(|(k, _)| k == n) {
                Some(&(_, v)) => Ok(v),
                None => g.leaf(t.clone(), false),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars, index: self.index.clone() })
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }
}

/// Graph handles of a bound [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
