use crate::error::{Result, TensorError};
use crate::kernels::ConvGeom;
use crate::tensor::{Precision, Tensor};

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    Standardize { x: Var, rstd: Vec<f64> },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Conv3d { x: Var, k: Var, geom: ConvGeom },
    ConvTranspose3d { x: Var, k: Var, geom: ConvGeom },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
    pub tracked_leaf: bool,
}

/// Linear record of executed operations.
///
/// Values are pushed in execution order; [`Tape::backward`] replays the
/// adjoints in exact reverse order and then invalidates the tape.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    precision: Precision,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            consumed: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    /// Records a trainable leaf (`requires_grad = true`).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.set_precision(self.precision);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            tracked_leaf: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub(crate) fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::Usage(format!(
                "{name}: tape was already consumed by backward()"
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        let mut value = Tensor::from_parts(shape, data);
        value.set_precision(self.precision);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            tracked_leaf: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a one-element output.
    ///
    /// Populates a gradient for every tracked leaf (zeros when the leaf does
    /// not influence the output). The tape cannot be reused afterwards.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::Usage("backward() called on a consumed tape".into()));
        }
        let out_node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| TensorError::Usage(format!("{output:?} is not on this tape")))?;
        if out_node.value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward() needs a scalar output, got shape {:?}",
                out_node.value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            crate::backward::propagate(self, i, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            if node.tracked_leaf {
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                out.push(Some(Tensor::from_parts(node.value.shape().to_vec(), data)));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }
}

pub(crate) fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
        Op::MatMul(a, b) | Op::BatchMatMul(a, b) => vec![*a, *b],
        Op::Scale(x, _) | Op::Offset(x) | Op::Reshape(x) | Op::Permute(x, _) => vec![*x],
        Op::Relu(x) | Op::Gelu(x) | Op::Sum(x) => vec![*x],
        Op::Narrow { x, .. } | Op::Softmax { x, .. } | Op::Standardize { x, .. } | Op::SumAxis { x, .. } => vec![*x],
        Op::Concat(xs, _) => xs.clone(),
        Op::Conv3d { x, k, .. } | Op::ConvTranspose3d { x, k, .. } => vec![*x, *k],
    }
}

/// Gradients of the tracked leaves of one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
