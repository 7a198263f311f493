//! Named parameter storage and per-tape binding.

use cmfn_tensor::{Tape, Tensor, Var};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered parameter list. Order is part of the checkpoint contract.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Parameter values in store order.
    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Places every parameter on the tape, grad-requiring when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.bind_with(tape, |_| trainable)
    }

    /// Places every parameter on the tape; `trainable(name)` decides which
    /// ones require gradients.
    pub fn bind_with(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable(&p.name)))
                .collect(),
        }
    }
}

/// Tape handles for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps caller-created leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order after `tape.backward`; constants report zeros.
    pub fn gradients(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
            .collect()
    }
}

/// Uniform Glorot initialization.
pub fn glorot(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-limit..limit))
}

/// Glorot for a `[kh, kw, cin, cout]` convolution kernel.
pub fn glorot_conv(rng: &mut impl Rng, kh: usize, kw: usize, cin: usize, cout: usize) -> Tensor {
    glorot(rng, &[kh, kw, cin, cout], kh * kw * cin, kh * kw * cout)
}

/// He-uniform for a `[kh, kw, cin, cout]` kernel feeding a relu.
pub fn he_conv(rng: &mut impl Rng, kh: usize, kw: usize, cin: usize, cout: usize) -> Tensor {
    let limit = (6.0 / (kh * kw * cin) as f64).sqrt();
    Tensor::from_fn(vec![kh, kw, cin, cout], |_| rng.random_range(-limit..limit))
}

/// Glorot for a `[din, dout]` projection.
pub fn glorot_linear(rng: &mut impl Rng, din: usize, dout: usize) -> Tensor {
    glorot(rng, &[din, dout], din, dout)
}
