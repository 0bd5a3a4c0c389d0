//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! are methods on the tape that take [`Var`] handles and append a node; the
//! nodes are therefore in topological order by construction. A single call to
//! [`Tape::backward`] walks the nodes in exact reverse recording order and
//! consumes the tape.
//!
//! ```
//! use rescuenet::autodiff::Tape;
//! use rescuenet::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_f64([1], &[2.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
//! ```

pub(crate) mod ops;

pub use ops::{BinaryKind, UnaryKind};

use crate::error::{Error, Result};
use crate::layers::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    MulScalar {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
        log: bool,
    },
    Sum {
        x: Var,
        scale: T,
    },
    Reshape {
        x: Var,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Expand {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Matmul { a, b } => vec![*a, *b],
            Op::Unary { x, .. }
            | Op::MulScalar { x, .. }
            | Op::AddScalar { x }
            | Op::Clamp { x, .. }
            | Op::Softmax { x, .. }
            | Op::Sum { x, .. }
            | Op::Reshape { x }
            | Op::Narrow { x, .. }
            | Op::Expand { x }
            | Op::Upsample { x, .. }
            | Op::GlobalAvgPool { x } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        // Without a gradient path the saved activations are dead weight.
        let op = if requires_grad {
            op
        } else {
            match op {
                Op::Conv2d { x, w, b, geom, .. } => Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols: Vec::new(),
                },
                other => other,
            }
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(loss)/d(node) to every node with a gradient path and
    /// returns the gradients. The tape cannot be differentiated twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }

        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => ops::binary_backward(self, *kind, *a, *b, g, grads),
            Op::Unary { kind, x } => ops::unary_backward(self, *kind, *x, &node.value, g, grads),
            Op::MulScalar { x, c } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi * *c;
                    }
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((d, &gi), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v >= *lo && v <= *hi {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Matmul { a, b } => ops::matmul_backward(self, *a, *b, g, grads),
            Op::Softmax { x, axis, log } => {
                ops::softmax_backward(self, *x, *axis, *log, &node.value, g, grads)
            }
            Op::Sum { x, scale } => {
                let s = g[0] * *scale;
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for d in buf.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                ops::narrow_backward(self, *x, *axis, *start, node.value.shape(), g, grads)
            }
            Op::Concat { xs, axis } => ops::concat_backward(self, xs, *axis, g, grads),
            Op::Expand { x } => ops::expand_backward(self, *x, node.value.shape(), g, grads),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => layers::conv2d_backward(self, *x, *w, *b, *geom, cols, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => layers::batch_norm_backward(self, *x, *gamma, *beta, xhat, inv_std, g, grads),
            Op::Upsample { x, factor } => layers::upsample_backward(self, *x, *factor, g, grads),
            Op::GlobalAvgPool { x } => layers::global_avg_pool_backward(self, *x, g, grads),
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// has no gradient path.
    pub(crate) fn grad_buf<'g>(
        &self,
        grads: &'g mut [Option<Vec<T>>],
        v: Var,
    ) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }
}

/// Gradients of leaf tensors produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` if the leaf was not reachable from the
    /// loss or does not track gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
