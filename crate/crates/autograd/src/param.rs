use std::collections::HashMap;

use rand::Rng;

use crate::error::{arg_err, Result};
use crate::graph::{Graph, Gradients, ParamId, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named, ordered set of learnable tensors with gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return arg_err("param", format!("duplicate parameter name {name:?}"));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(value.shape()),
            value,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// He-uniform initialization: U(−√(6/fan_in), √(6/fan_in)).
    pub fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Binds `id` into `graph`; frozen parameters enter as constants.
    pub fn bind(&self, graph: &mut Graph, id: ParamId) -> Var {
        let p = &self.params[id.0];
        graph.param(id, &p.value, p.trainable)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Rescales the gradients of trainable parameters so their joint L2 norm
    /// is at most `max_norm`. Returns the norm before clipping; a non-finite
    /// norm leaves the buffers as they are.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let trainable = || self.params.iter().filter(|p| p.trainable);
        let norm = trainable().map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
        if norm.is_finite() && norm > max_norm {
            let scale = max_norm / norm;
            for p in self.params.iter_mut().filter(|p| p.trainable) {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    /// Adds the parameter gradients of one backward pass into the buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g.data());
        }
    }
}
