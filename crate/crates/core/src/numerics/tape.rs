use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;

/// Handle into a [`Tape`] arena. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Nonlinearity selector for [`Tape::activation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
}

/// One recorded operation. Each variant stores the participating vars plus
/// whatever forward-pass byproducts the reverse pass needs (argmax positions,
/// masks, integer targets). Input *values* are re-read from the arena.
#[derive(Debug)]
pub(crate) enum Op<F: Real> {
    Add { a: Var, b: Var, out: Var },
    Scale { a: Var, c: F, out: Var },
    Gather { table: Var, ids: Vec<usize>, out: Var },
    Linear { x: Var, w: Var, b: Option<Var>, out: Var },
    Matmul { a: Var, b: Var, out: Var },
    BatchMatmul { a: Var, b: Var, out: Var },
    BatchMatmulTb { a: Var, b: Var, out: Var },
    SplitHeads { x: Var, heads: usize, out: Var },
    MergeHeads { x: Var, heads: usize, out: Var },
    Softmax { x: Var, axis: usize, out: Var },
    MaskedSoftmax { x: Var, out: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, out: Var },
    Activation { x: Var, kind: Activation, out: Var },
    Conv1d { x: Var, kernel: Var, bias: Var, out: Var },
    MaxPool1d { x: Var, argmax: Vec<Option<usize>>, out: Var },
    ZeroMasked { x: Var, mask: Vec<bool>, out: Var },
    MaskedMean { x: Var, mask: Vec<bool>, out: Var },
    MaskedMax { x: Var, argmax: Vec<usize>, out: Var },
    TakeFirst { x: Var, out: Var },
    ConcatCols { parts: Vec<Var>, out: Var },
    AbsDiff { a: Var, b: Var, out: Var },
    CosineRows { a: Var, b: Var, out: Var },
    MseLoss { pred: Var, target: Vec<F>, out: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, out: Var },
    MulMask { x: Var, mask: Vec<F>, out: Var },
    DotConst { x: Var, weights: Vec<F>, out: Var },
}

/// Arena-backed reverse-mode tape.
///
/// Forward methods validate shapes, compute values eagerly, and append an op
/// record when any input is tracked. [`Tape::backward`] replays the records
/// in reverse, accumulating gradients into each node's `grad` slot. Tensors
/// whose `requires_grad` is false never receive a gradient and ops with no
/// tracked input are never recorded.
pub struct Tape<F: Real> {
    nodes: Vec<Tensor<F>>,
    pub(crate) ops: Vec<Op<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new() }
    }

    /// Moves a tensor onto the tape; its `requires_grad` flag decides tracking.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let tracked = t.requires_grad;
        self.push(t, tracked)
    }

    /// Copies a host tensor onto the tape as a tracked parameter.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        let mut c = t.clone();
        c.grad = None;
        self.push(c, true)
    }

    /// Copies a host tensor onto the tape as untracked input data.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        let mut c = t.clone();
        c.grad = None;
        self.push(c, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        Ok(self.push(Tensor::new(shape, data)?, false))
    }

    pub(crate) fn push(&mut self, mut t: Tensor<F>, tracked: bool) -> Var {
        t.requires_grad = tracked;
        self.nodes.push(t);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].shape()
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].data()
    }

    pub fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any was
    /// accumulated. Untracked nodes and nodes the loss does not depend on
    /// yield `None`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn accumulate(&mut self, v: Var, contrib: &[F]) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(node.numel(), contrib.len());
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + *ci;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    pub(crate) fn out_grad(&self, out: Var) -> Option<Vec<F>> {
        self.nodes[out.0].grad.clone()
    }

    /// Reverse sweep from a scalar loss. Gradients from any previous sweep on
    /// this tape are discarded first, so calling it again recomputes rather
    /// than double-accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].is_scalar() {
            return Err(Error::Shape(format!(
                "backward target must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.reverse(op)?;
        }
        self.ops = ops;
        Ok(())
    }
}
