use crate::{Real, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    SegmentMean {
        input: Var,
        segment: Vec<usize>,
        counts: Vec<usize>,
    },
    L2Normalize(Var),
    Cosine(Var, Var),
    DotLast(Var, Var),
    Transpose(Var),
    Reshape(Var),
    StopGradient,
    StraightThrough(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        group: Option<Vec<usize>>,
    },
    MaxLast {
        input: Var,
        argmax: Vec<usize>,
    },
    LayerNorm {
        input: Var,
        eps: T,
    },
}

impl<T> Op<T> {
    /// Inputs through which gradient flows.
    fn grad_inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Constant | StopGradient => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | Cosine(a, b)
            | DotLast(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Relu(x) | Exp(x) | Log(x) | Softmax(x)
            | LogSoftmax(x) | Sum(x) | Mean(x) | SumLast(x) | L2Normalize(x) | Transpose(x)
            | Reshape(x) | StraightThrough(x) => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
            Slice { input, .. }
            | GatherRows { input, .. }
            | SegmentMean { input, .. }
            | MaxLast { input, .. }
            | LayerNorm { input, .. } => vec![*input],
            Conv1d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) kink_margin: f64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
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

    /// Smallest distance, over every relu input and every row max taken so
    /// far, to a point where the graph is not differentiable. Finite
    /// difference checks are only meaningful when this is well above the
    /// step size.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Fingerprint of every branch decision taken so far: the sign pattern
    /// of each relu input and the argmax of each row max. Two evaluations
    /// with equal signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u64| h = (h ^ b).wrapping_mul(0x0000_0100_0000_01b3);
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    feed(i as u64);
                    for v in self.nodes[x.0].value.data() {
                        feed((*v > T::zero()) as u64);
                    }
                }
                Op::MaxLast { argmax, .. } => {
                    feed(i as u64);
                    argmax.iter().for_each(|&a| feed(a as u64 + 2));
                }
                _ => {}
            }
        }
        h
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op
            .grad_inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// Gradient of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(go) = grads[i].take() else { continue };
            for (input, contrib) in self.local_grads(i, &go) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                    slot => *slot = Some(contrib),
                }
            }
        }
        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => {
                    Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` is not a leaf or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Like [`get`](Self::get) but materializes zeros for unreached leaves.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }
}
