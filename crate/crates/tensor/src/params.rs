use std::collections::HashMap;

use crate::{Matrix, Scalar};

/// Handle to a trainable matrix inside a [`ParamStore`]. Two modules holding the
/// same id share the parameter: an update through one is visible to the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Matrix<F>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix<F>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        id
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix<F> {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<F> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Parameter gradients produced by [`crate::Graph::backward`], indexed like the store.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub(crate) params: Vec<Option<Matrix<F>>>,
    pub(crate) inputs: Vec<(usize, Matrix<F>)>,
}

impl<F: Scalar> Gradients<F> {
    pub fn empty(n_params: usize) -> Self {
        Self { params: vec![None; n_params], inputs: Vec::new() }
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix<F>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. a graph input created with [`crate::Graph::input`].
    pub fn input(&self, v: crate::Var) -> Option<&Matrix<F>> {
        self.inputs.iter().find(|(i, _)| *i == v.index()).map(|(_, m)| m)
    }

    pub(crate) fn accumulate_param(&mut self, id: ParamId, g: &Matrix<F>) {
        match &mut self.params[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds another gradient set (same store) into this one.
    pub fn add(&mut self, other: &Self) {
        assert_eq!(self.params.len(), other.params.len(), "gradient sets from different stores");
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add_assign(y),
                (None, Some(y)) => *a = Some(y.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.params.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> F {
        self.params.iter().flatten().map(Matrix::sq_norm).sum::<F>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: F) -> F {
        let norm = self.global_norm();
        if norm > max_norm && norm > F::zero() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(Matrix::all_finite)
    }
}
