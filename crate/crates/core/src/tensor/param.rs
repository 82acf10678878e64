use super::graph::{Gradients, Graph, Var};
use super::{Result, Scalar, Tensor, TensorError};
use std::collections::HashMap;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Trainable tensor with its momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Option<Tensor<f32>>,
    pub momentum: Tensor<f32>,
}

/// Ordered, named parameter collection. Order defines checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

/// Parameters of a store bound as leaves of one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created elsewhere, one per store parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let momentum = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad: None, momentum });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|i| ParamId(*i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds every parameter to `graph` as a gradient-tracking leaf, cast to `T`.
    pub fn bind<T: Scalar>(&self, graph: &mut Graph<T>) -> Bound {
        Bound { vars: self.params.iter().map(|p| graph.param(p.value.cast())).collect() }
    }

    /// Adds the bound parameters' gradients into each `Parameter::grad`.
    pub fn accumulate_grads<T: Scalar>(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            let Some(g) = grads.raw(*v) else { continue };
            let dst = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (d, s) in dst.data_mut().iter_mut().zip(g) {
                *d += s.as_f64() as f32;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Global L2 norm of the current gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// `v ← m·v + g + wd·w; w ← w − lr·v`, then clears gradients.
pub fn sgd_step(store: &mut ParamStore, cfg: SgdConfig) -> Result<()> {
    if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
        return Err(TensorError::MissingGrad(p.name.clone()));
    }
    for p in &mut store.params {
        let g = p.grad.take().expect("checked above");
        let w = p.value.data_mut();
        let v = p.momentum.data_mut();
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vi = cfg.momentum * *vi + *gi + cfg.weight_decay * *wi;
            *wi -= cfg.lr * *vi;
        }
    }
    Ok(())
}
