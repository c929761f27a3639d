//! Named parameter storage and the two layer kinds the networks are built from.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
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

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Replaces every tensor with the same-named entry of `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Tape handles for every tensor of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He,
    Normal(f64),
    Zeros,
}

pub fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor {
    let std = match init {
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Normal(std) => std,
        Init::Zeros => return Tensor::zeros(shape.to_vec()),
    };
    let normal = Normal::new(0.0, std).expect("finite positive std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.push(
            format!("{name}.weight"),
            init_tensor(&[out_channels, in_channels, kernel, kernel], fan_in, init, rng),
        );
        let bias = store.push(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over NCHW channels. Affine parameters live in the
/// parameter store; running statistics in a separate buffer store.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(params: &mut ParamStore, buffers: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.push(format!("{name}.gamma"), Tensor::full([channels], 1.0)),
            beta: params.push(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: buffers.push(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: buffers.push(format!("{name}.running_var"), Tensor::full([channels], 1.0)),
        }
    }

    pub fn forward_train(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, BatchStats)> {
        g.batch_norm_train(x, p.var(self.gamma), p.var(self.beta), BN_EPS)
    }

    pub fn forward_eval(&self, g: &mut Graph, p: &Bound, buffers: &ParamStore, x: Var) -> Result<Var> {
        g.batch_norm_eval(
            x,
            p.var(self.gamma),
            p.var(self.beta),
            buffers.get(self.running_mean).data(),
            buffers.get(self.running_var).data(),
            BN_EPS,
        )
    }

    /// Exponential moving average update; the running variance uses the
    /// unbiased batch estimate.
    pub fn update_running(&self, buffers: &mut ParamStore, stats: &BatchStats) {
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (rm, &m) in buffers.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
        }
        for (rv, &v) in buffers.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v * correction;
        }
    }
}
