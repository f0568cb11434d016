//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough saved state to run its backward rule. Nodes can only
//! refer to earlier nodes, so the tape is topologically ordered by
//! construction and [`Graph::backward`] is a single reverse sweep.

mod backward;
mod gumbel;
mod ops;

pub use gumbel::{gumbel_noise, gumbel_softmax};
pub(crate) use ops::softplus;

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Reciprocal(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Pow {
        base: Var,
        exponent: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    MeanSpatial(Var),
    VarSpatial(Var),
    MeanChannels(Var),
    MaxChannels {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    Index {
        x: Var,
        i: usize,
    },
    Slice0 {
        x: Var,
        i: usize,
    },
    MulChannels {
        x: Var,
        gains: Var,
    },
    MulPlane {
        x: Var,
        plane: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    Sum(Var),
    Mean(Var),
    UnpackRgb(Var),
    MseConst {
        x: Var,
        target: Vec<f64>,
    },
    NegEntropy {
        x: Var,
        bins: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// The tape. See the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(shape),
                values.len()
            )));
        }
        Ok(self.push_node(shape.to_vec(), values, Op::Leaf, requires_grad))
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.leaf(shape, values, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.leaf(shape, values, true)
    }

    pub(crate) fn push_node(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient populated by [`Graph::backward`]; `None` when the node was
    /// not reached from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    ///
    /// The loss must hold exactly one element. A graph can be swept once;
    /// a second call is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = backward::input_grads(self, i, &grad);
            self.nodes[i].grad = Some(grad);
            for (input, g) in contributions {
                let node = &mut self.nodes[input.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
