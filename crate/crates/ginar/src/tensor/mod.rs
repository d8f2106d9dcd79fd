//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] owns every tensor created during a computation. Operations
//! append a node holding the output values plus enough metadata to replay the
//! step backwards; [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients. [`Tensor`] is a copyable handle (an index into the
//! tape), so model code passes tensors around freely while the tape keeps
//! single ownership of the buffers.
//!
//! Parameters are ordinary nodes flagged persistent. The intended training
//! pattern is:
//!
//! 1. create parameters, then take a [`Tape::checkpoint`];
//! 2. per batch: record the forward pass, call `backward`, read parameter
//!    gradients, update parameter values in place;
//! 3. [`Tape::truncate`] back to the checkpoint, which drops the transient
//!    part of the graph but keeps parameters and their accumulated gradients.
//!
//! Gradients accumulate across `backward` calls until [`Tape::zero_grads`];
//! this makes gradient accumulation over micro-batches the default behaviour
//! rather than a special mode.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport, ParamInit};

use std::fmt;

/// Scalar element type of a tape: `f32` for fast training, `f64` for
/// verification-grade numerics. All internal constants are written as `f64`
/// and converted, so both instantiations share one code path.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant into the tape element type.
#[inline]
pub(crate) fn real<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("constant representable in element type")
}

/// Handle to a node on a [`Tape`]. Cheap to copy; only meaningful together
/// with the tape that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tensor(pub(crate) usize);

/// Errors raised by tape operations. Shape problems name the offending
/// operation and both shapes so the message alone localizes the bug.
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: needs at least {need} dimensions, got shape {shape:?}")]
    NeedsRank {
        op: &'static str,
        need: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} has zero extent in shape {shape:?}")]
    EmptyAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLen {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: row index {index} out of range for {rows} rows")]
    RowIndex {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{op}: duplicate row index {index}")]
    DuplicateRow { op: &'static str, index: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub(crate) type Result<T> = std::result::Result<T, TensorError>;

/// Recorded operation. Inputs are tape indices of earlier nodes; constants
/// needed by the backward pass are stored inline.
#[derive(Debug, Default, Clone)]
pub(crate) enum Op<F: Real> {
    #[default]
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Concat {
        parts: Vec<Tensor>,
        axis: usize,
    },
    Affine {
        x: Tensor,
        alpha: F,
    },
    Relu(Tensor),
    LeakyRelu {
        x: Tensor,
        slope: F,
    },
    Gelu(Tensor),
    Elu(Tensor),
    Sigmoid(Tensor),
    Abs(Tensor),
    Ln(Tensor),
    Softmax {
        x: Tensor,
        axis: usize,
    },
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
    },
    GatherRows {
        x: Tensor,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Tensor,
        idx: Vec<usize>,
    },
    RowScale {
        x: Tensor,
    },
    RowAffine {
        x: Tensor,
    },
    Dropout {
        x: Tensor,
    },
    ExpandLeading {
        x: Tensor,
    },
    SumAll(Tensor),
    MeanAll(Tensor),
}

#[derive(Debug, Default)]
pub(crate) struct Node<F: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub op: Op<F>,
    /// Cached values the backward pass needs (layer-norm statistics, dropout
    /// multipliers, row scales).
    pub saved: Vec<F>,
    pub param: bool,
}

/// The computation tape: an append-only arena of [`Node`]s.
#[derive(Debug, Default)]
pub struct Tape<F: Real> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Create a non-parameter leaf (input data or constants).
    pub fn leaf(&mut self, shape: &[usize], data: Vec<F>) -> Result<Tensor> {
        self.push_leaf(shape, data, false)
    }

    /// Create a parameter leaf. Parameters survive [`Tape::truncate`] when
    /// created before the checkpoint and report gradients after `backward`.
    pub fn param(&mut self, shape: &[usize], data: Vec<F>) -> Result<Tensor> {
        self.push_leaf(shape, data, true)
    }

    /// Leaf filled with zeros.
    pub fn zeros(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.leaf(shape, vec![F::zero(); n])
    }

    fn push_leaf(&mut self, shape: &[usize], data: Vec<F>, param: bool) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TensorError::DataLen {
                op: "leaf",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            op: Op::Leaf,
            saved: Vec::new(),
            param,
        }))
    }

    pub(crate) fn push(&mut self, node: Node<F>) -> Tensor {
        self.nodes.push(node);
        Tensor(self.nodes.len() - 1)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: Tensor) -> &[F] {
        &self.nodes[t.0].data
    }

    /// Mutable access to a node's values. Intended for in-place parameter
    /// updates between forward passes; rewriting a non-leaf mid-graph leaves
    /// recorded children stale.
    pub fn data_mut(&mut self, t: Tensor) -> &mut [F] {
        &mut self.nodes[t.0].data
    }

    /// Accumulated gradient of a node, if `backward` reached it.
    pub fn grad(&self, t: Tensor) -> Option<&[F]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Mutable access to a node's accumulated gradient, if present. Lets an
    /// optimizer rescale gradients in place (norm clipping) between
    /// `backward` and the parameter update.
    pub fn grad_mut(&mut self, t: Tensor) -> Option<&mut [F]> {
        self.nodes[t.0].grad.as_deref_mut()
    }

    /// Gradient as an owned vector, zeros when the node was not reached by
    /// any `backward` call since the last reset.
    pub fn grad_or_zeros(&self, t: Tensor) -> Vec<F> {
        match &self.nodes[t.0].grad {
            Some(g) => g.clone(),
            None => vec![F::zero(); self.nodes[t.0].data.len()],
        }
    }

    /// The scalar value of a 1-element tensor.
    pub fn scalar(&self, t: Tensor) -> F {
        assert_eq!(self.nodes[t.0].data.len(), 1, "scalar() on non-scalar");
        self.nodes[t.0].data[0]
    }

    /// Mark the current tape length. Later [`Tape::truncate`] calls drop
    /// everything recorded after this point.
    pub fn checkpoint(&self) -> usize {
        self.nodes.len()
    }

    /// Drop all nodes recorded after `mark`, keeping earlier nodes (typically
    /// parameters) and their accumulated gradients. Truncating away a
    /// parameter would silently destroy trainable state, so that is an error.
    pub fn truncate(&mut self, mark: usize) -> Result<()> {
        if let Some(i) = (mark..self.nodes.len()).find(|&i| self.nodes[i].param) {
            return Err(TensorError::Invalid {
                op: "truncate",
                msg: format!("mark {mark} would drop the parameter at node {i}"),
            });
        }
        self.nodes.truncate(mark);
        Ok(())
    }

    /// Clear every gradient buffer on the tape.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse pass from a scalar loss: seeds `d loss/d loss = 1`, walks the
    /// tape from the loss down to node 0 through per-call scratch buffers,
    /// then adds the result onto each node's persistent gradient. Every
    /// `backward` call therefore contributes exactly one `d loss/d node` to
    /// every node the loss depends on; gradients accumulate across calls
    /// until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut scratch: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = scratch[id].take() else {
                continue;
            };
            if !matches!(self.nodes[id].op, Op::Leaf) {
                self.backprop(id, &g, &mut scratch);
            }
            // Fold the per-call flow into the persistent gradient.
            let node = &mut self.nodes[id];
            let buf = node
                .grad
                .get_or_insert_with(|| vec![F::zero(); node.data.len()]);
            for (b, d) in buf.iter_mut().zip(&g) {
                *b = *b + *d;
            }
        }
        Ok(())
    }
}

/// Add `delta` into scratch slot `id`, allocating zeros on first touch.
pub(crate) fn scratch_add<F: Real>(
    scratch: &mut [Option<Vec<F>>],
    id: usize,
    len: usize,
    delta: &[F],
) {
    let buf = scratch[id].get_or_insert_with(|| vec![F::zero(); len]);
    for (b, d) in buf.iter_mut().zip(delta) {
        *b = *b + *d;
    }
}

pub(crate) fn scratch_add_with<F: Real>(
    scratch: &mut [Option<Vec<F>>],
    id: usize,
    len: usize,
    f: impl FnOnce(&mut [F]),
) {
    let buf = scratch[id].get_or_insert_with(|| vec![F::zero(); len]);
    f(buf);
}

/// Product of all extents: the element count of a shape.
pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Decompose `shape` around `axis` into (outer, extent, inner) so that the
/// flat index of element (o, j, i) is `(o * extent + j) * inner + i`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
