use std::collections::HashMap;

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Result, TsaError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A learnable tensor. `grad` is `None` until a backward pass reaches it.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
}

/// Named parameters in registration order. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TsaError::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Looks up a parameter id, failing with a config error naming it.
    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| TsaError::Config(format!("missing parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => p.grad = Some(grad.to_vec()),
        }
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self
            .params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
        norm
    }
}

/// Xavier/Glorot uniform initialisation for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}

pub fn normal_init(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| std * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).expect("normal shape")
}

/// Registers freshly initialised parameters, or binds to the ones already
/// present in a set (checking their shapes), under the same names.
pub struct ParamBuilder<'a> {
    params: &'a mut ParamSet,
    rng: Option<&'a mut Rng>,
}

impl<'a> ParamBuilder<'a> {
    pub fn init(params: &'a mut ParamSet, rng: &'a mut Rng) -> Self {
        ParamBuilder {
            params,
            rng: Some(rng),
        }
    }

    pub fn bind(params: &'a mut ParamSet) -> Self {
        ParamBuilder { params, rng: None }
    }

    fn slot(&mut self, name: &str, shape: &[usize], make: impl FnOnce(&mut Rng) -> Tensor) -> Result<ParamId> {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let value = make(rng);
                self.params.insert(name, value)
            }
            None => {
                let id = self
                    .params
                    .id(name)
                    .ok_or_else(|| TsaError::format(name, "tensor missing from checkpoint"))?;
                let found = self.params.value(id).shape();
                if found != shape {
                    return Err(TsaError::format(
                        name,
                        format!("expected shape {shape:?}, found {found:?}"),
                    ));
                }
                Ok(id)
            }
        }
    }

    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.slot(name, &[rows, cols], |rng| xavier_uniform(rows, cols, rng))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.slot(name, shape, |_| Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.slot(name, shape, |_| Tensor::full(shape, value))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        self.slot(name, shape, |rng| normal_init(shape, std, rng))
    }
}
