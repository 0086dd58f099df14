use crate::error::{Result, TensorError};
use crate::kernels::ConvGeom;
use crate::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward pass is computed outside the tape and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` where the input gets nothing.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias { x: Var, bias: Var, axis: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    LogClamped { x: Var, floor: T },
    MatMul(Var, Var),
    Transpose(Var),
    Softmax { x: Var, axis: usize, temperature: T },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, col: Option<Vec<T>> },
    AvgPool2(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Relu(x) | Sigmoid(x) | Tanh(x) | Abs(x) | Square(x)
            | Transpose(x) | Sum(x) | Mean(x) | AvgPool2(x) | Reshape(x) => vec![*x],
            AddBias { x, bias, .. } => vec![*x, *bias],
            LogClamped { x, .. } | Softmax { x, .. } | Slice { x, .. } | Gather { x, .. } => vec![*x],
            Conv2d { x, w, .. } => vec![*x, *w],
            Concat { parts, .. } => parts.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            AddBias { .. } => "add_bias",
            Relu(..) => "relu",
            Sigmoid(..) => "sigmoid",
            Tanh(..) => "tanh",
            Abs(..) => "abs",
            Square(..) => "square",
            LogClamped { .. } => "log",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            Softmax { .. } => "softmax",
            Sum(..) => "sum",
            Mean(..) => "mean",
            Conv2d { .. } => "conv2d",
            AvgPool2(..) => "avg_pool2",
            Concat { .. } => "concat",
            Slice { .. } => "slice",
            Reshape(..) => "reshape",
            Gather { .. } => "gather",
            LayerNorm { .. } => "layer_norm",
            Custom { op, .. } => op.name(),
        }
    }
}

pub(crate) struct Node<T: Real> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records one forward pass and replays it backwards exactly once.
///
/// Nodes are appended in execution order, which is a topological order by
/// construction. After [`Tape::backward`] the tape is consumed: recording
/// or a second backward returns a contract error.
pub struct Tape<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false, check_finite: false }
    }

    /// Enables NaN/Inf detection on every recorded value.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
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

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Every trainable leaf has one after backward (zeros if unused).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::Contract(
                "tape already consumed by backward; record a new forward pass".into(),
            ));
        }
        if self.check_finite {
            if let Some(index) = value.first_non_finite() {
                return Err(TensorError::NonFinite { op: op.name().into(), index });
            }
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a custom operation whose output was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::Contract("backward called twice on the same tape".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(TensorError::Contract(format!("{output:?} is not on this tape")));
        }
        if self.nodes[output.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let out_shape = self.nodes[output.0].value.shape().to_vec();
        grads[output.0] = Some(Tensor::ones(&out_shape));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gin) in self.backward_rule(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gin),
                    slot => *slot = Some(gin),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        // Saved buffers are dead once the sweep is done.
        for node in &mut self.nodes {
            if let Op::Conv2d { col, .. } = &mut node.op {
                *col = None;
            }
        }
        Ok(())
    }
}
