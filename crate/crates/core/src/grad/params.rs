use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{GradError, Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    /// Gaussian init with standard deviation `std`.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let data = (0..crate::tensor::numel(shape)).map(|_| T::lit(normal.sample(rng))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    /// Uniform init on `[-bound, bound]`.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) {
        let data = (0..crate::tensor::numel(shape))
            .map(|_| T::lit(if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 }))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    /// Dense layer `name.w` of shape `[input, output]` and bias `name.b`, both
    /// uniform with fan-in bound `1/sqrt(input)`.
    pub fn insert_linear(&mut self, name: &str, input: usize, output: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        self.insert_uniform(&format!("{name}.w"), &[input, output], bound, rng);
        self.insert_uniform(&format!("{name}.b"), &[output], bound, rng);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, GradError> {
        self.tensors.get(name).ok_or_else(|| GradError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, GradError> {
        self.tensors.get_mut(name).ok_or_else(|| GradError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Puts every tensor on `graph` as a trainable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        self.bind_with(graph, true)
    }

    /// Puts every tensor on `graph` as a constant.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { graph.param(v.clone()) } else { graph.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { graph, vars }
    }

    /// Checks that every name in `other` exists here with the same shape.
    pub fn check_compatible(&self, other: &ParamStore<T>) -> Result<(), GradError> {
        for (name, t) in &other.tensors {
            let mine = self.get(name)?;
            if mine.shape() != t.shape() {
                return Err(GradError::ParamShape {
                    name: name.clone(),
                    expected: mine.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if self.len() != other.len() {
            let missing = self.names().find(|n| !other.contains(n)).unwrap_or_default().to_string();
            return Err(GradError::MissingParam(missing));
        }
        Ok(())
    }
}

/// A [`ParamStore`] placed on a graph.
pub struct Bound<'g, T: Real> {
    graph: &'g Graph<T>,
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// Substitutes the variable bound under `name`.
    pub fn replace(&mut self, name: &str, var: Var<'g, T>) -> Result<(), GradError> {
        let slot = self.vars.get_mut(name).ok_or_else(|| GradError::MissingParam(name.to_string()))?;
        if slot.shape() != var.shape() {
            return Err(GradError::ParamShape { name: name.to_string(), expected: slot.shape(), found: var.shape() });
        }
        *slot = var;
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<Var<'g, T>, GradError> {
        self.vars.get(name).copied().ok_or_else(|| GradError::MissingParam(name.to_string()))
    }

    /// `x · name.w + name.b` on a `[R, in]` input.
    pub fn linear(&self, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        x.matmul(w)?.add_row(b)
    }

    /// Gradients for every bound name; parameters with no gradient path get zeros.
    pub fn collect(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.get_or_zeros(*v))).collect()
    }
}
