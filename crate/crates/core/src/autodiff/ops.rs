//! Forward definitions of the primitive operations.

use std::rc::Rc;

use super::tape::{Op, RotationTable, Var};
use super::tensor::{gemm_nn, Tensor};
use crate::error::{Error, Result};

fn shape_str(t: &Tensor) -> String {
    format!("{}x{}", t.rows(), t.cols())
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn map_unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.tape.inner.borrow().nodes[self.id].value.map(f);
        self.tape.push(out, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        check: impl FnOnce(&Tensor, &Tensor) -> bool,
        f: impl FnOnce(&Tensor, &Tensor) -> Tensor,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            if !check(a, b) {
                return Err(Error::shape(
                    name,
                    format!("operands {} and {}", shape_str(a), shape_str(b)),
                ));
            }
            f(a, b)
        };
        Ok(self.tape.push(out, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "add",
            |a, b| a.shape() == b.shape(),
            |a, b| a.zip_map(b, |x, y| x + y),
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "sub",
            |a, b| a.shape() == b.shape(),
            |a, b| a.zip_map(b, |x, y| x - y),
            Op::Sub(self.id, other.id),
        )
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "mul",
            |a, b| a.shape() == b.shape(),
            |a, b| a.zip_map(b, |x, y| x * y),
            Op::Mul(self.id, other.id),
        )
    }

    /// Adds a `1×c` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            row,
            "add_row",
            |a, b| b.rows() == 1 && a.cols() == b.cols(),
            |a, b| {
                let mut out = a.clone();
                for r in 0..a.rows() {
                    for (o, &v) in out.row_mut(r).iter_mut().zip(b.data()) {
                        *o += v;
                    }
                }
                out
            },
            Op::AddRow(self.id, row.id),
        )
    }

    /// Multiplies every row elementwise by a `1×c` row.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            row,
            "mul_row",
            |a, b| b.rows() == 1 && a.cols() == b.cols(),
            |a, b| {
                let mut out = a.clone();
                for r in 0..a.rows() {
                    for (o, &v) in out.row_mut(r).iter_mut().zip(b.data()) {
                        *o *= v;
                    }
                }
                out
            },
            Op::MulRow(self.id, row.id),
        )
    }

    /// Multiplies every column elementwise by an `r×1` column.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            col,
            "mul_col",
            |a, b| b.cols() == 1 && a.rows() == b.rows(),
            |a, b| {
                let mut out = a.clone();
                for r in 0..a.rows() {
                    let s = b.data()[r];
                    for o in out.row_mut(r) {
                        *o *= s;
                    }
                }
                out
            },
            Op::MulCol(self.id, col.id),
        )
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.map_unary(Op::Scale(self.id, factor), |x| x * factor)
    }

    pub fn add_scalar(self, value: f64) -> Var<'t> {
        self.map_unary(Op::AddScalar(self.id), |x| x + value)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "matmul",
            |a, b| a.cols() == b.rows(),
            |a, b| {
                let mut out = Tensor::zeros(a.rows(), b.cols());
                gemm_nn(
                    a.data(),
                    b.data(),
                    out.data_mut(),
                    a.rows(),
                    a.cols(),
                    b.cols(),
                );
                out
            },
            Op::MatMul(self.id, other.id),
        )
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.tape.inner.borrow().nodes[self.id].value.transpose();
        self.tape.push(out, Op::Transpose(self.id))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let out = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].value;
            if v.len() != rows * cols {
                return Err(Error::shape(
                    "reshape",
                    format!("{} to {rows}x{cols}", shape_str(v)),
                ));
            }
            Tensor::from_vec(rows, cols, v.data().to_vec())?
        };
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let out = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].value;
            if start > end || end > v.cols() {
                return Err(Error::shape(
                    "slice_cols",
                    format!("columns {start}..{end} of {}", shape_str(v)),
                ));
            }
            v.slice_cols(start, end)
        };
        Ok(self.tape.push(out, Op::SliceCols(self.id, start)))
    }

    /// Row `o` of the result is row `index[o]` of `self`.
    pub fn gather_rows(self, index: &Rc<[usize]>) -> Result<Var<'t>> {
        let out = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].value;
            if let Some(&bad) = index.iter().find(|&&i| i >= v.rows()) {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {bad} out of range for {}", shape_str(v)),
                ));
            }
            v.select_rows(index)
        };
        Ok(self.tape.push(out, Op::GatherRows(self.id, index.clone())))
    }

    /// Sums row `r` of `self` into row `index[r]` of an `out_rows`-row result.
    pub fn scatter_add_rows(self, index: &Rc<[usize]>, out_rows: usize) -> Result<Var<'t>> {
        let out = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].value;
            if index.len() != v.rows() {
                return Err(Error::shape(
                    "scatter_add_rows",
                    format!("{} indices for {}", index.len(), shape_str(v)),
                ));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= out_rows) {
                return Err(Error::shape(
                    "scatter_add_rows",
                    format!("index {bad} out of range for {out_rows} output rows"),
                ));
            }
            let mut out = Tensor::zeros(out_rows, v.cols());
            for (r, &i) in index.iter().enumerate() {
                for (o, &x) in out.row_mut(i).iter_mut().zip(v.row(r)) {
                    *o += x;
                }
            }
            out
        };
        Ok(self
            .tape
            .push(out, Op::ScatterAddRows(self.id, index.clone())))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.tape.inner.borrow().nodes[self.id].value.sum());
        self.tape.push(out, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].value.len()
        };
        self.sum().scale(1.0 / n.max(1) as f64)
    }

    /// Sum over axis 0, giving a `1×c` row.
    pub fn sum_rows(self) -> Var<'t> {
        let out = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].value;
            let mut out = Tensor::zeros(1, v.cols());
            for r in 0..v.rows() {
                for (o, &x) in out.data_mut().iter_mut().zip(v.row(r)) {
                    *o += x;
                }
            }
            out
        };
        self.tape.push(out, Op::SumRows(self.id))
    }

    /// Sum over axis 1, giving an `r×1` column.
    pub fn sum_cols(self) -> Var<'t> {
        let out = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].value;
            let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
            Tensor::from_vec(v.rows(), 1, data).expect("column shape")
        };
        self.tape.push(out, Op::SumCols(self.id))
    }

    pub fn mean_cols(self) -> Var<'t> {
        let c = self.cols().max(1) as f64;
        self.sum_cols().scale(1.0 / c)
    }

    pub fn mean_rows(self) -> Var<'t> {
        let r = self.rows().max(1) as f64;
        self.sum_rows().scale(1.0 / r)
    }

    pub fn exp(self) -> Var<'t> {
        self.map_unary(Op::Exp(self.id), f64::exp)
    }

    pub fn tanh(self) -> Var<'t> {
        self.map_unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map_unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        self.map_unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    pub fn square(self) -> Var<'t> {
        self.map_unary(Op::Square(self.id), |x| x * x)
    }

    pub fn rsqrt(self) -> Var<'t> {
        self.map_unary(Op::Rsqrt(self.id), |x| 1.0 / x.sqrt())
    }

    pub fn recip(self) -> Var<'t> {
        self.map_unary(Op::Recip(self.id), |x| 1.0 / x)
    }

    /// Softmax along each row. Rows that are entirely `-inf` become zeros.
    pub fn softmax_rows(self) -> Var<'t> {
        let out = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].value;
            let mut out = v.clone();
            for r in 0..v.rows() {
                softmax_in_place(out.row_mut(r));
            }
            out
        };
        self.tape.push(out, Op::SoftmaxRows(self.id))
    }

    /// Softmax along each column.
    pub fn softmax_cols(self) -> Var<'t> {
        let out = {
            let inner = self.tape.inner.borrow();
            let t = inner.nodes[self.id].value.transpose();
            let mut out = t.clone();
            for r in 0..t.rows() {
                softmax_in_place(out.row_mut(r));
            }
            out.transpose()
        };
        self.tape.push(out, Op::SoftmaxCols(self.id))
    }

    /// Replaces entries where `mask` is true by `value`.
    pub fn masked_fill(self, mask: &Rc<[bool]>, value: f64) -> Result<Var<'t>> {
        let out = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].value;
            if mask.len() != v.len() {
                return Err(Error::shape(
                    "masked_fill",
                    format!("mask of length {} for {}", mask.len(), shape_str(v)),
                ));
            }
            let mut out = v.clone();
            for (o, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
                if m {
                    *o = value;
                }
            }
            out
        };
        Ok(self.tape.push(out, Op::MaskedFill(self.id, mask.clone())))
    }

    /// Softmax over row segments `offsets[s]..offsets[s+1]`, independently
    /// for every column. Empty segments are allowed.
    pub fn segment_softmax(self, offsets: &Rc<[usize]>) -> Result<Var<'t>> {
        let out = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].value;
            if offsets.last().copied() != Some(v.rows()) || offsets.windows(2).any(|w| w[0] > w[1])
            {
                return Err(Error::shape(
                    "segment_softmax",
                    format!("offsets do not partition the {} rows", v.rows()),
                ));
            }
            let mut out = v.clone();
            let cols = v.cols();
            let mut buf = Vec::new();
            for w in offsets.windows(2) {
                for c in 0..cols {
                    buf.clear();
                    buf.extend((w[0]..w[1]).map(|r| v.get(r, c)));
                    softmax_in_place(&mut buf);
                    for (k, r) in (w[0]..w[1]).enumerate() {
                        out.set(r, c, buf[k]);
                    }
                }
            }
            out
        };
        Ok(self
            .tape
            .push(out, Op::SegmentSoftmax(self.id, offsets.clone())))
    }

    /// Per-row dot products over `groups` equal-width column blocks,
    /// giving an `r×groups` result.
    pub fn grouped_row_dot(self, other: Var<'t>, groups: usize) -> Result<Var<'t>> {
        self.binary(
            other,
            "grouped_row_dot",
            |a, b| a.shape() == b.shape() && groups > 0 && a.cols() % groups == 0,
            |a, b| {
                let w = a.cols() / groups;
                let mut out = Tensor::zeros(a.rows(), groups);
                for r in 0..a.rows() {
                    let (ar, br) = (a.row(r), b.row(r));
                    for g in 0..groups {
                        let s: f64 = (g * w..(g + 1) * w).map(|c| ar[c] * br[c]).sum();
                        out.set(r, g, s);
                    }
                }
                out
            },
            Op::GroupedRowDot(self.id, other.id, groups),
        )
    }

    /// Scales column block `g` of row `r` by `scales[r, g]`.
    pub fn grouped_scale(self, scales: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            scales,
            "grouped_scale",
            |a, s| a.rows() == s.rows() && s.cols() > 0 && a.cols() % s.cols() == 0,
            |a, s| {
                let w = a.cols() / s.cols();
                let mut out = a.clone();
                for r in 0..a.rows() {
                    let sr = s.row(r).to_vec();
                    for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                        *o *= sr[c / w];
                    }
                }
                out
            },
            Op::GroupedScale(self.id, scales.id),
        )
    }

    /// Rotates column pairs of every row by the angles encoded in `table`.
    pub fn rotate_pairs(self, table: &Rc<RotationTable>) -> Result<Var<'t>> {
        let out = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].value;
            let p = table.pairs.len();
            if table.rows != v.rows()
                || table
                    .pairs
                    .iter()
                    .any(|&(a, b)| a >= v.cols() || b >= v.cols())
            {
                return Err(Error::shape(
                    "rotate_pairs",
                    format!(
                        "table for {} rows / {} pairs applied to {}",
                        table.rows,
                        p,
                        shape_str(v)
                    ),
                ));
            }
            let mut out = v.clone();
            for r in 0..v.rows() {
                let row = out.row_mut(r);
                for (k, &(c0, c1)) in table.pairs.iter().enumerate() {
                    let (cs, sn) = (table.cos[r * p + k], table.sin[r * p + k]);
                    let (x0, x1) = (row[c0], row[c1]);
                    row[c0] = x0 * cs - x1 * sn;
                    row[c1] = x0 * sn + x1 * cs;
                }
            }
            out
        };
        Ok(self.tape.push(out, Op::RotatePairs(self.id, table.clone())))
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        xs.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}
