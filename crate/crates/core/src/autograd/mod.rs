//! A small reverse-mode automatic differentiation tape.
//!
//! Every operation appends a node holding its forward value and a closure
//! that maps the output gradient to input gradients. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

mod conv;
mod elementwise;
mod spatial;

pub use conv::conv2d_output_size;
pub use elementwise::sigmoid;
pub use spatial::BatchStats;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Receives `(output_grad, inputs, output, needs_grad)` and returns one
/// optional gradient per input.
type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf that accumulates gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A constant copy of `v`; gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar `root` through the whole tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.backward_from(root, Var(0))
    }

    /// Backpropagates from a scalar `root`, skipping every node created
    /// before `floor`. Gradients are still reported for `floor` itself.
    pub fn backward_from(&self, root: Var, floor: Var) -> Result<Gradients> {
        let seed = &self.nodes[root.0].value;
        if seed.numel() != 1 {
            return Err(Error::shape("backward", "scalar root", format!("{:?}", seed.shape())));
        }
        self.backward_with_seed(root, Tensor::full(seed.shape().to_vec(), 1.0), floor)
    }

    pub fn backward_with_seed(&self, root: Var, seed: Tensor, floor: Var) -> Result<Gradients> {
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(Error::shape(
                "backward seed",
                format!("{:?}", self.nodes[root.0].value.shape()),
                format!("{:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (floor.0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].as_ref() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| v.0 >= floor.0 && self.nodes[v.0].requires_grad)
                .collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = backward(grad, &inputs, &node.value, &needs);
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[input.0] = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}
