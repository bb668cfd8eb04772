use super::ops::Op;
use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Record {
    op: Op,
    inputs: Vec<Var>,
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    record: Option<Record>,
    grad: Option<Tensor<T>>,
}

/// Append-only tape of values and the operations that produced them.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that recorded an operation for the backward pass.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.record.is_some()).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, record: Option<Record>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>, AutodiffError> {
        self.nodes.get(v.0).ok_or(AutodiffError::UnknownVar(v.0))
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

    /// Accumulated gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// Evaluates `op` on `operands`. The result is recorded for the backward
    /// pass only when some operand requires a gradient.
    pub fn apply(&mut self, op: Op, operands: &[Var]) -> Result<Var, AutodiffError> {
        let mut inputs = Vec::with_capacity(operands.len());
        let mut requires_grad = false;
        for &v in operands {
            let node = self.node(v)?;
            requires_grad |= node.requires_grad;
            inputs.push(&node.value);
        }
        let value = op.forward(&inputs)?;
        let record = requires_grad.then(|| Record {
            op,
            inputs: operands.to_vec(),
        });
        Ok(self.push(value, requires_grad, record))
    }

    /// Reverse sweep from a single-valued `loss`. Gradients accumulate into
    /// every node that requires one; fan-out contributions are summed.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let shape = self.node(loss)?.value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::ones(&shape));
        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            if let Some(record) = &self.nodes[idx].record {
                let inputs: Vec<&Tensor<T>> =
                    record.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let grads = record.op.backward(&inputs, &self.nodes[idx].value, &g);
                for (input, gi) in record.inputs.iter().zip(grads) {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    let slot = &mut pending[input.0];
                    *slot = Some(match slot.take() {
                        Some(acc) => add(acc, &gi),
                        None => gi,
                    });
                }
            }
            let node = &mut self.nodes[idx];
            node.grad = Some(match node.grad.take() {
                Some(acc) => add(acc, &g),
                None => g,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Relu, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Op::Sum(axes.to_vec()), &[a])
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Op::Mean(axes.to_vec()), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Op::Transpose(perm.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Op::Concat(axis), parts)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Op::Softmax(axis), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Op::LogSoftmax(axis), &[a])
    }

    pub fn log_clamped(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::LogClamped, &[a])
    }

    pub fn upsample2d(&mut self, a: Var, factor: usize) -> Result<Var, AutodiffError> {
        self.apply(Op::Upsample2d(factor), &[a])
    }

    pub fn patch_merge2d(&mut self, a: Var, factor: usize) -> Result<Var, AutodiffError> {
        self.apply(Op::PatchMerge2d(factor), &[a])
    }

    pub fn cosine(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Op::Cosine(axis), &[a, b])
    }

    /// Sums a non-empty list of same-shaped variables left to right.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var, AutodiffError> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| AutodiffError::InvalidShape("add_n of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }
}

fn add<T: Real>(mut acc: Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    acc.data_mut()
        .iter_mut()
        .zip(g.data())
        .for_each(|(a, &b)| *a = *a + b);
    acc
}
