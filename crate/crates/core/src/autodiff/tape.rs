use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Storage precision of forward values recorded on a tape.
///
/// Arithmetic always runs in `f64`; in `F32` mode every recorded value is
/// rounded to the nearest `f32` after the op that produced it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

static DEFAULT_F32: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

impl Precision {
    /// Precision of tapes made by [`Tape::new`].
    pub fn process_default() -> Precision {
        if DEFAULT_F32.load(std::sync::atomic::Ordering::Relaxed) {
            Precision::F32
        } else {
            Precision::F64
        }
    }

    pub fn set_process_default(p: Precision) {
        DEFAULT_F32.store(p == Precision::F32, std::sync::atomic::Ordering::Relaxed);
    }

    /// Reads `MESHROLLOUT_PRECISION` (`f32` or `f64`), defaulting to `fallback`.
    pub fn from_env(fallback: Precision) -> Precision {
        match std::env::var("MESHROLLOUT_PRECISION").as_deref() {
            Ok("f32") => Precision::F32,
            Ok("f64") => Precision::F64,
            _ => fallback,
        }
    }
}

/// Per-pair rotation table used by [`Var::rotate_pairs`].
#[derive(Debug, Clone)]
pub struct RotationTable {
    /// Column pairs `(c0, c1)` rotated together.
    pub pairs: Vec<(usize, usize)>,
    /// `rows × pairs.len()` cosines, row-major.
    pub cos: Vec<f64>,
    /// `rows × pairs.len()` sines, row-major.
    pub sin: Vec<f64>,
    pub rows: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Exp(usize),
    Tanh(usize),
    Sigmoid(usize),
    Silu(usize),
    Square(usize),
    Rsqrt(usize),
    Recip(usize),
    SoftmaxRows(usize),
    SoftmaxCols(usize),
    MaskedFill(usize, Rc<[bool]>),
    SegmentSoftmax(usize, Rc<[usize]>),
    GroupedRowDot(usize, usize, usize),
    GroupedScale(usize, usize),
    RotatePairs(usize, Rc<RotationTable>),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

pub(crate) struct Inner {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Tensor>>,
    pub(crate) backward_done: bool,
}

/// Records operations in execution order for reverse-mode differentiation.
pub struct Tape {
    pub(crate) inner: RefCell<Inner>,
    precision: Precision,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [r, c] = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::process_default())
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
                backward_done: false,
            }),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that accumulates a gradient during [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, mut value: Tensor, requires_grad: bool) -> Var<'_> {
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, mut value: Tensor, op: Op) -> Var<'_> {
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = op_parents(&op)
            .iter()
            .any(|&p| inner.nodes[p].requires_grad);
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// Concatenates along columns; all inputs must share the row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let out = {
            let inner = self.inner.borrow();
            let rows = parts
                .first()
                .map(|p| inner.nodes[p.id].value.rows())
                .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
            let mut cols = 0;
            for p in parts {
                let v = &inner.nodes[p.id].value;
                if v.rows() != rows {
                    return Err(Error::shape(
                        "concat_cols",
                        format!("row counts {} and {}", rows, v.rows()),
                    ));
                }
                cols += v.cols();
            }
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut offset = 0;
                for p in parts {
                    let v = &inner.nodes[p.id].value;
                    out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
                    offset += v.cols();
                }
            }
            out
        };
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Concatenates along rows; all inputs must share the column count.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let out = {
            let inner = self.inner.borrow();
            let cols = parts
                .first()
                .map(|p| inner.nodes[p.id].value.cols())
                .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &inner.nodes[p.id].value;
                if v.cols() != cols {
                    return Err(Error::shape(
                        "concat_rows",
                        format!("column counts {} and {}", cols, v.cols()),
                    ));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::from_vec(rows, cols, data)?
        };
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// Runs reverse accumulation from a `1x1` loss.
    ///
    /// Gradients are stored for every leaf that requires one; call
    /// [`Tape::reset_grads`] before a second backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(
            std::ptr::eq(loss.tape, self),
            "loss belongs to another tape"
        );
        let leaf_grads = {
            let inner = self.inner.borrow();
            if inner.backward_done {
                return Err(Error::BackwardTwice);
            }
            let value = &inner.nodes[loss.id].value;
            if value.shape() != [1, 1] {
                return Err(Error::NonScalarLoss {
                    rows: value.rows(),
                    cols: value.cols(),
                });
            }
            super::backward::run(&inner.nodes, loss.id)
        };
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        inner.grads = (0..n).map(|_| None).collect();
        for (id, g) in leaf_grads {
            inner.grads[id] = Some(g);
        }
        inner.backward_done = true;
        Ok(())
    }

    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.clear();
        inner.backward_done = false;
    }

    /// Gradient of the last backward pass with respect to a leaf.
    ///
    /// Leaves that require a gradient but were not reached get zeros;
    /// constants and interior nodes return `None`.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[var.id];
        if !inner.backward_done || !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        Some(
            inner
                .grads
                .get(var.id)
                .and_then(Clone::clone)
                .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols())),
        )
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// Value of a `1x1` var.
    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.inner.borrow().nodes[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}

pub(crate) fn op_parents(op: &Op) -> Vec<usize> {
    use Op::*;
    match op {
        Leaf => vec![],
        Add(a, b)
        | Sub(a, b)
        | Mul(a, b)
        | AddRow(a, b)
        | MulRow(a, b)
        | MulCol(a, b)
        | MatMul(a, b)
        | GroupedRowDot(a, b, _)
        | GroupedScale(a, b) => vec![*a, *b],
        ConcatCols(ps) | ConcatRows(ps) => ps.clone(),
        Scale(a, _)
        | AddScalar(a)
        | Transpose(a)
        | Reshape(a)
        | SliceCols(a, _)
        | GatherRows(a, _)
        | ScatterAddRows(a, _)
        | SumAll(a)
        | SumRows(a)
        | SumCols(a)
        | Exp(a)
        | Tanh(a)
        | Sigmoid(a)
        | Silu(a)
        | Square(a)
        | Rsqrt(a)
        | Recip(a)
        | SoftmaxRows(a)
        | SoftmaxCols(a)
        | MaskedFill(a, _)
        | SegmentSoftmax(a, _)
        | RotatePairs(a, _) => vec![*a],
    }
}
