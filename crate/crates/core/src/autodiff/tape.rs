//! Wengert-list tape: operations are appended in execution order and
//! replayed in reverse by [`Tape::backward`].

use super::tensor::{Scalar, Tensor};
use super::{conv, elementwise, linalg, loss, norm};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// How the right operand of a binary elementwise op maps onto the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    Scalar,
    /// Right operand is a `[c]` vector broadcast along dimension 1.
    Channel { c: usize, inner: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    Add { a: Var, b: Var, bcast: Bcast },
    Mul { a: Var, b: Var, bcast: Bcast },
    Scale { x: Var, c: T },
    Relu { x: Var },
    Exp { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    MatMul { a: Var, b: Var },
    SqDist { a: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Option<Vec<T>> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    Concat { xs: Vec<Var> },
    Narrow { x: Var, offset: usize },
    Column { x: Var, col: usize },
    LogSoftmax { x: Var },
    Softmax { x: Var },
    CrossEntropy { x: Var, labels: Vec<usize> },
    KlDiv { x: Var, teacher: Vec<T> },
    StraightThrough { x: Var },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Records a forward computation so that gradients can be replayed.
///
/// A tape is single-threaded. Independent tapes share nothing and may be
/// driven from different threads.
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient slots for the nodes strictly below the one being replayed.
pub(crate) struct GradSink<'a, T> {
    slots: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Forward value of an input; the borrow outlives the sink borrow so it
    /// can be read while an accumulator is held mutably.
    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Zero-initialized accumulator for `v`.
    pub fn slot(&mut self, v: Var) -> &mut Vec<T> {
        let n = self.nodes[v.0].value.numel();
        self.slots[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Adds `g` elementwise into the accumulator of `v` when it needs one.
    pub fn add(&mut self, v: Var, g: &[T]) {
        if !self.wants(v) {
            return;
        }
        let slot = self.slot(v);
        for (s, x) in slot.iter_mut().zip(g) {
            *s = *s + *x;
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Tensor<T>) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
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

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse pass from a scalar `loss`. Gradients of every node that
    /// requires them are added into the stored gradients, so repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut slots: Vec<Option<Vec<T>>> = Vec::new();
        slots.resize_with(loss.0 + 1, || None);
        slots[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            {
                let (lower, _) = slots.split_at_mut(i);
                let (nodes_lower, rest) = self.nodes.split_at(i);
                let node = &rest[0];
                let mut sink = GradSink {
                    slots: lower,
                    nodes: nodes_lower,
                };
                propagate(node, &g, &mut sink);
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

fn propagate<T: Scalar>(node: &Node<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b, bcast } => elementwise::add_backward(*a, *b, *bcast, g, sink),
        Op::Mul { a, b, bcast } => elementwise::mul_backward(*a, *b, *bcast, g, sink),
        Op::Scale { x, c } => {
            let scaled: Vec<T> = g.iter().map(|v| *v * *c).collect();
            sink.add(*x, &scaled);
        }
        Op::Relu { x } => elementwise::relu_backward(*x, g, sink),
        Op::Exp { x } => {
            let d: Vec<T> = g.iter().zip(out.data()).map(|(g, y)| *g * *y).collect();
            sink.add(*x, &d);
        }
        Op::Sum { x } => {
            let n = sink.value(*x).numel();
            sink.add(*x, &vec![g[0]; n]);
        }
        Op::Mean { x } => {
            let n = sink.value(*x).numel();
            sink.add(*x, &vec![g[0] / T::of(n as f64); n]);
        }
        Op::MatMul { a, b } => linalg::matmul_backward(*a, *b, g, sink),
        Op::SqDist { a, b } => linalg::sq_dist_backward(*a, *b, g, sink),
        Op::Conv2d { x, k, geom, cols } => {
            conv::conv2d_backward(*x, *k, geom, cols.as_deref(), g, sink)
        }
        Op::MaxPool { x, argmax } => conv::max_pool_backward(*x, argmax, g, sink),
        Op::GlobalAvgPool { x } => conv::global_avg_pool_backward(*x, g, sink),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => norm::batch_norm_backward(*x, *gamma, *beta, xhat, inv_std, g, sink),
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => norm::batch_norm_eval_backward(*x, *gamma, *beta, mean, inv_std, g, sink),
        Op::Reshape { x } | Op::StraightThrough { x } => sink.add(*x, g),
        Op::Concat { xs } => {
            let mut off = 0;
            for x in xs {
                let n = sink.value(*x).numel();
                sink.add(*x, &g[off..off + n]);
                off += n;
            }
        }
        Op::Narrow { x, offset } => {
            if sink.wants(*x) {
                let slot = sink.slot(*x);
                for (s, v) in slot[*offset..*offset + g.len()].iter_mut().zip(g) {
                    *s = *s + *v;
                }
            }
        }
        Op::Column { x, col } => {
            if sink.wants(*x) {
                let cols = sink.value(*x).shape()[1];
                let slot = sink.slot(*x);
                for (i, v) in g.iter().enumerate() {
                    slot[i * cols + col] = slot[i * cols + col] + *v;
                }
            }
        }
        Op::LogSoftmax { x } => loss::log_softmax_backward(*x, out, g, sink),
        Op::Softmax { x } => loss::softmax_backward(*x, out, g, sink),
        Op::CrossEntropy { x, labels } => loss::cross_entropy_backward(*x, labels, g, sink),
        Op::KlDiv { x, teacher } => loss::kl_div_backward(*x, teacher, g, sink),
    }
}
