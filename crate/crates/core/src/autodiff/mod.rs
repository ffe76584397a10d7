//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so the tape is always in topological order and backward is
//! a single reverse sweep. Gradients are retained for grad-enabled leaves and
//! for nodes explicitly marked with [`Tape::retain_grad`]; everything else is
//! dropped as soon as it has been propagated.

mod check;
mod nn;
mod ops;

use alloc::vec;
use alloc::vec::Vec;

pub use check::{grad_check, grad_check_many};
pub use nn::{BatchNormMode, BatchStats, RunningStats, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Sqrt,
    Exp,
    Log,
    Neg,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Offset {
        a: Var,
    },
    ClampMin {
        a: Var,
        min: f64,
    },
    Reduce {
        a: Var,
        axes: Vec<usize>,
        mean: bool,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        a: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    L2Norm {
        a: Var,
        axis: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    LatentMix {
        z: Var,
        phi: Var,
        time_step: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape and its tensors belong to one thread; independent tapes can run
/// concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Grad-enabled leaf (parameter or input under differentiation).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
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

    /// Keep the gradient of an intermediate node after [`Tape::backward`].
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Accumulated gradient of `v`, if `v` is a grad-enabled leaf or a retained
    /// node reached by a backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
        });
        self.grads.push(None);
        Var(id)
    }

    pub(crate) fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(crate::error::invalid(
                "tape",
                "variable does not belong to this tape",
            ))
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss)?;
        let shape = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            local[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            if !matches!(node.op, Op::Leaf) {
                self.backprop_node(i, &g, &mut local);
            }
            if matches!(node.op, Op::Leaf) || node.retain {
                accumulate(&mut self.grads[i], &g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut sink = GradSink { tape: self, local };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => ops::binary_backward(&mut sink, *kind, *a, *b, g),
            Op::Unary { kind, a } => ops::unary_backward(&mut sink, *kind, *a, &node.value, g),
            Op::Scale { a, factor } => {
                let ga: Vec<f64> = g.iter().map(|v| v * factor).collect();
                sink.add(*a, ga);
            }
            Op::Offset { a } => sink.add(*a, g.to_vec()),
            Op::ClampMin { a, min } => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > *min { *gv } else { 0.0 })
                    .collect();
                sink.add(*a, ga);
            }
            Op::Reduce { a, axes, mean } => ops::reduce_backward(&mut sink, *a, axes, *mean, g),
            Op::Reshape { a } => sink.add(*a, g.to_vec()),
            Op::Permute { a, perm } => ops::permute_backward(&mut sink, *a, perm, g),
            Op::Concat { inputs, axis } => ops::concat_backward(&mut sink, inputs, *axis, g),
            Op::IndexSelect { a, axis, indices } => {
                ops::index_select_backward(&mut sink, *a, *axis, indices, g)
            }
            Op::Softmax { a, axis } => ops::softmax_backward(&mut sink, *a, *axis, &node.value, g),
            Op::L2Norm { a, axis } => ops::l2norm_backward(&mut sink, *a, *axis, &node.value, g),
            Op::MatMul { a, b } => nn::matmul_backward(&mut sink, *a, *b, g),
            Op::Affine { x, w, b } => nn::affine_backward(&mut sink, *x, *w, *b, g),
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => nn::conv2d_backward(&mut sink, *x, *w, *stride, *padding, g),
            Op::LatentMix { z, phi, time_step } => {
                nn::latent_mix_backward(&mut sink, *z, *phi, *time_step, g)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => nn::batch_norm_backward(&mut sink, *x, *gamma, *beta, xhat, inv_std, *train, g),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => nn::cross_entropy_backward(&mut sink, *logits, labels, probs, g),
        }
    }
}

/// Collects gradient contributions for the inputs of one node.
pub(crate) struct GradSink<'a> {
    tape: &'a Tape,
    local: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    pub(crate) fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub(crate) fn add(&mut self, v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.local[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![*a, *b],
        Op::Unary { a, .. }
        | Op::Scale { a, .. }
        | Op::Offset { a }
        | Op::ClampMin { a, .. }
        | Op::Reduce { a, .. }
        | Op::Reshape { a }
        | Op::Permute { a, .. }
        | Op::IndexSelect { a, .. }
        | Op::Softmax { a, .. }
        | Op::L2Norm { a, .. } => vec![*a],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::Affine { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::LatentMix { z, phi, .. } => vec![*z, *phi],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}
