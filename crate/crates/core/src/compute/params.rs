use std::ops::Index;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;

use super::graph::{Graph, Matrix, Tensor, Var};
use crate::error::{MsgcaError, Result};

/// A named learnable weight with its Adam moment estimates.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, values: Matrix) -> Self {
        let dim = values.dim();
        Parameter {
            name: name.into(),
            tensor: Tensor::new(values, true),
            adam_m: Array2::zeros(dim),
            adam_v: Array2::zeros(dim),
        }
    }

    pub fn values(&self) -> &Matrix {
        self.tensor.values()
    }

    pub fn values_mut(&mut self) -> &mut Matrix {
        self.tensor.values_mut()
    }

    pub fn grad(&self) -> Option<&Matrix> {
        self.tensor.grad()
    }
}

/// Every learnable weight of a model, addressed by a stable name and kept in
/// insertion order so iteration (and serialization) is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ModelParams {
    params: IndexMap<String, Parameter>,
}

/// Graph handles for a [`ModelParams`] bound into one [`Graph`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Index<&str> for ParamVars {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-limit..limit))
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Matrix) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(MsgcaError::Config(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.params
            .insert(name.clone(), Parameter::new(name, values));
        Ok(())
    }

    /// Adds a parameter that already carries optimizer state.
    pub fn insert_parameter(&mut self, param: Parameter) -> Result<()> {
        if self.params.contains_key(&param.name) {
            return Err(MsgcaError::Config(format!(
                "duplicate parameter name `{}`",
                param.name
            )));
        }
        self.params.insert(param.name.clone(), param);
        Ok(())
    }

    /// Adds a Glorot-initialized weight.
    pub fn insert_weight<R: Rng>(
        &mut self,
        name: &str,
        rng: &mut R,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<()> {
        self.insert(name, glorot_uniform(rng, fan_in, fan_out))
    }

    /// Adds a zero 1xwidth bias.
    pub fn insert_bias(&mut self, name: &str, width: usize) -> Result<()> {
        self.insert(name, Array2::zeros((1, width)))
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.values().len()).sum()
    }

    /// Registers every parameter as a leaf of `graph`. Trainable leaves
    /// receive gradients on backward; frozen ones are plain constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let values = p.values().clone();
                let var = if trainable {
                    graph.variable(values)
                } else {
                    graph.constant(values)
                };
                (name.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }

    /// Copies gradients from a finished backward pass. Parameters the loss
    /// does not depend on get an explicit zero gradient.
    pub fn collect_grads(&mut self, graph: &Graph, vars: &ParamVars) {
        for (name, p) in self.params.iter_mut() {
            let grad = vars
                .get(name)
                .and_then(|v| graph.grad(v).cloned())
                .unwrap_or_else(|| Array2::zeros(p.values().dim()));
            p.tensor.set_grad(Some(grad));
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.set_grad(None);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad())
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Per-parameter value norms, used when reporting numeric aborts.
    pub fn value_norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|(n, p)| {
                (
                    n.clone(),
                    p.values().iter().map(|x| x * x).sum::<f64>().sqrt(),
                )
            })
            .collect()
    }

    /// Scales every gradient so the global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for p in self.params.values_mut() {
                if let Some(g) = p.tensor.grad() {
                    let scaled = g * factor;
                    p.tensor.set_grad(Some(scaled));
                }
            }
        }
    }
}
