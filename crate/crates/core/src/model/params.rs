use std::ops::Index;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, Tape, Tensor, Var};

/// Position of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound<'t, T: Element> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Element> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

impl<'t, T: Element> Bound<'t, T> {
    /// Substitutes one handle; used to differentiate through a single tensor.
    pub fn replace(&mut self, id: ParamId, var: Var<'t, T>) {
        self.vars[id.0] = var;
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let (idx, old) = self.params.insert_full(name.into(), tensor);
        assert!(old.is_none(), "duplicate parameter name");
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.params.values_mut().for_each(|t| t.set_requires_grad(flag));
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on the tape as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.params.values().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Accumulates gradients from a backward sweep into the grad slots.
    pub fn absorb_grads(&mut self, bound: &Bound<'_, T>, grads: &Gradients<T>) {
        for (t, v) in self.params.values_mut().zip(&bound.vars) {
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = grads.get(*v) {
                t.accumulate_grad(g);
            }
        }
    }

    /// True if every parameter is bitwise identical to its counterpart.
    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Appends all tensors of `other`, prefixing their names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Overwrites values of tensors in `self` from same-named tensors in `src`.
    pub fn copy_values_from(&mut self, src: &ParamStore<T>) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let s = src
                .by_name(name)
                .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
            if s.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "copy_values_from",
                    lhs: t.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            t.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }
}

pub(crate) fn uniform<T: Element>(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-scale, scale).expect("finite scale");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

pub(crate) fn gaussian<T: Element>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}
