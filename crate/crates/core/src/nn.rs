//! Parameter storage and the handful of layers the models are built from.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]. A training step binds the
//! store onto a fresh tape, runs the forward pass against the bound
//! variables, and hands the collected gradients to an optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::optim::Adam;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, as leaves when `trainable`,
    /// otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| {
                    if trainable {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        }
    }

    /// Applies one optimizer step from the gradients of a bound copy.
    pub fn apply(&mut self, opt: &mut Adam, bound: &Bound, grads: &Gradients) -> Result<()> {
        let g: Vec<Tensor> = bound.vars.iter().map(|&v| grads.wrt(v)).collect();
        opt.step(self.tensors.iter_mut(), &g)
    }

    /// Replaces all values from `(name, tensor)` pairs, matching by name.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in entries {
            let Some(i) = self.names.iter().position(|n| *n == name) else {
                return Err(NumError::Format(format!("unknown parameter {name}")));
            };
            if self.tensors[i].shape() != t.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "load_named",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// A [`ParamStore`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables in store order, e.g. to swap one parameter for a probe.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Silu,
    Softplus,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Silu => tape.silu(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// `y = x · W + b` with `W: [in×out]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Fully connected stack with a shared hidden activation and a linear head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_activation: Activation,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], act: Activation, rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            hidden_activation: act,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i < last {
                h = self.hidden_activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }

    pub fn in_features(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    /// Zeroes every bias so a zero input produces an exactly zero output.
    pub fn zero_biases(&self, store: &mut ParamStore) {
        for l in &self.layers {
            store.get_mut(l.bias).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = (3.0 / fan_in as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[out_ch, in_ch, kernel, kernel], -bound, bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.padding)
    }
}
