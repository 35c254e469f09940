//! Reverse accumulation over a recorded tape.

use super::ops::sigmoid;
use super::tape::{Node, Op};
use super::tensor::{gemm_nt, gemm_tn, Tensor};

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Back-propagates a unit seed from `loss` and returns the gradients of
/// every reached leaf that requires one.
pub(crate) fn run(nodes: &[Node], loss: usize) -> Vec<(usize, Tensor)> {
    let mut grads: Vec<Option<Tensor>> = (0..=loss).map(|_| None).collect();
    let mut leaves = Vec::new();
    if !nodes[loss].requires_grad {
        return leaves;
    }
    grads[loss] = Some(Tensor::scalar(1.0));
    for id in (0..=loss).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &nodes[id];
        let y = &node.value;
        let val = |p: usize| &nodes[p].value;
        let needs = |p: usize| nodes[p].requires_grad;
        match &node.op {
            Op::Leaf => leaves.push((id, g)),
            Op::Add(a, b) => {
                if needs(*b) {
                    accumulate(&mut grads, nodes, *b, g.clone());
                }
                accumulate(&mut grads, nodes, *a, g);
            }
            Op::Sub(a, b) => {
                if needs(*b) {
                    accumulate(&mut grads, nodes, *b, g.map(|x| -x));
                }
                accumulate(&mut grads, nodes, *a, g);
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads, nodes, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    accumulate(&mut grads, nodes, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if needs(*row) {
                    accumulate(&mut grads, nodes, *row, sum_rows(&g));
                }
                accumulate(&mut grads, nodes, *a, g);
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                if needs(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (o, &s) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *o *= s;
                        }
                    }
                    accumulate(&mut grads, nodes, *a, ga);
                }
                if needs(*row) {
                    let prod = g.zip_map(val(*a), |x, y| x * y);
                    accumulate(&mut grads, nodes, *row, sum_rows(&prod));
                }
            }
            Op::MulCol(a, col) => {
                let cv = val(*col);
                if needs(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = cv.data()[r];
                        for o in ga.row_mut(r) {
                            *o *= s;
                        }
                    }
                    accumulate(&mut grads, nodes, *a, ga);
                }
                if needs(*col) {
                    let av = val(*a);
                    let data = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(
                        &mut grads,
                        nodes,
                        *col,
                        Tensor::from_vec(g.rows(), 1, data).expect("column"),
                    );
                }
            }
            Op::Scale(a, f) => accumulate(&mut grads, nodes, *a, g.map(|x| x * f)),
            Op::AddScalar(a) => accumulate(&mut grads, nodes, *a, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm_nt(g.data(), bv.data(), ga.data_mut(), m, n, k);
                    accumulate(&mut grads, nodes, *a, ga);
                }
                if needs(*b) {
                    let mut gb = Tensor::zeros(k, n);
                    gemm_tn(av.data(), g.data(), gb.data_mut(), m, k, n);
                    accumulate(&mut grads, nodes, *b, gb);
                }
            }
            Op::Transpose(a) => accumulate(&mut grads, nodes, *a, g.transpose()),
            Op::Reshape(a) => {
                let [r, c] = val(*a).shape();
                accumulate(
                    &mut grads,
                    nodes,
                    *a,
                    Tensor::from_vec(r, c, g.into_data()).expect("reshape"),
                );
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        accumulate(&mut grads, nodes, p, g.slice_cols(offset, offset + w));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let c = g.cols();
                for &p in parts {
                    let h = val(p).rows();
                    if needs(p) {
                        let data = g.data()[offset * c..(offset + h) * c].to_vec();
                        accumulate(
                            &mut grads,
                            nodes,
                            p,
                            Tensor::from_vec(h, c, data).expect("rows"),
                        );
                    }
                    offset += h;
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(&mut grads, nodes, *a, ga);
            }
            Op::GatherRows(a, index) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (o, &i) in index.iter().enumerate() {
                    for (d, &x) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                        *d += x;
                    }
                }
                accumulate(&mut grads, nodes, *a, ga);
            }
            Op::ScatterAddRows(a, index) => {
                accumulate(&mut grads, nodes, *a, g.select_rows(index));
            }
            Op::SumAll(a) => {
                let [r, c] = val(*a).shape();
                accumulate(&mut grads, nodes, *a, Tensor::full(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let [r, c] = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).copy_from_slice(g.data());
                }
                accumulate(&mut grads, nodes, *a, ga);
            }
            Op::SumCols(a) => {
                let [r, c] = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let s = g.data()[i];
                    ga.row_mut(i).iter_mut().for_each(|x| *x = s);
                }
                accumulate(&mut grads, nodes, *a, ga);
            }
            Op::Exp(a) => accumulate(&mut grads, nodes, *a, g.zip_map(y, |g, y| g * y)),
            Op::Tanh(a) => accumulate(
                &mut grads,
                nodes,
                *a,
                g.zip_map(y, |g, y| g * (1.0 - y * y)),
            ),
            Op::Sigmoid(a) => accumulate(
                &mut grads,
                nodes,
                *a,
                g.zip_map(y, |g, y| g * y * (1.0 - y)),
            ),
            Op::Silu(a) => {
                let ga = g.zip_map(val(*a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                });
                accumulate(&mut grads, nodes, *a, ga);
            }
            Op::Square(a) => accumulate(
                &mut grads,
                nodes,
                *a,
                g.zip_map(val(*a), |g, x| 2.0 * g * x),
            ),
            Op::Rsqrt(a) => accumulate(
                &mut grads,
                nodes,
                *a,
                g.zip_map(y, |g, y| -0.5 * g * y * y * y),
            ),
            Op::Recip(a) => accumulate(&mut grads, nodes, *a, g.zip_map(y, |g, y| -g * y * y)),
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    softmax_backward(y.row(r), g.row(r), ga.row_mut(r));
                }
                accumulate(&mut grads, nodes, *a, ga);
            }
            Op::SoftmaxCols(a) => {
                let (yt, gt) = (y.transpose(), g.transpose());
                let mut ga = Tensor::zeros(gt.rows(), gt.cols());
                for r in 0..gt.rows() {
                    softmax_backward(yt.row(r), gt.row(r), ga.row_mut(r));
                }
                accumulate(&mut grads, nodes, *a, ga.transpose());
            }
            Op::MaskedFill(a, mask) => {
                let mut ga = g;
                for (x, &m) in ga.data_mut().iter_mut().zip(mask.iter()) {
                    if m {
                        *x = 0.0;
                    }
                }
                accumulate(&mut grads, nodes, *a, ga);
            }
            Op::SegmentSoftmax(a, offsets) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for w in offsets.windows(2) {
                    for c in 0..g.cols() {
                        let dot: f64 = (w[0]..w[1]).map(|r| y.get(r, c) * g.get(r, c)).sum();
                        for r in w[0]..w[1] {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                accumulate(&mut grads, nodes, *a, ga);
            }
            Op::GroupedRowDot(a, b, groups) => {
                let (av, bv) = (val(*a), val(*b));
                let w = av.cols() / groups;
                let spread = |other: &Tensor| {
                    let mut out = Tensor::zeros(other.rows(), other.cols());
                    for r in 0..other.rows() {
                        let gr = g.row(r);
                        let or = other.row(r);
                        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                            *o = gr[c / w] * or[c];
                        }
                    }
                    out
                };
                if needs(*a) {
                    accumulate(&mut grads, nodes, *a, spread(bv));
                }
                if needs(*b) {
                    accumulate(&mut grads, nodes, *b, spread(av));
                }
            }
            Op::GroupedScale(a, s) => {
                let (av, sv) = (val(*a), val(*s));
                let w = av.cols() / sv.cols();
                if needs(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let sr = sv.row(r);
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o *= sr[c / w];
                        }
                    }
                    accumulate(&mut grads, nodes, *a, ga);
                }
                if needs(*s) {
                    let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                    for r in 0..av.rows() {
                        let (gr, ar) = (g.row(r), av.row(r));
                        let out = gs.row_mut(r);
                        for c in 0..ar.len() {
                            out[c / w] += gr[c] * ar[c];
                        }
                    }
                    accumulate(&mut grads, nodes, *s, gs);
                }
            }
            Op::RotatePairs(a, table) => {
                let p = table.pairs.len();
                let mut ga = g;
                for r in 0..ga.rows() {
                    let row = ga.row_mut(r);
                    for (k, &(c0, c1)) in table.pairs.iter().enumerate() {
                        let (cs, sn) = (table.cos[r * p + k], table.sin[r * p + k]);
                        let (g0, g1) = (row[c0], row[c1]);
                        row[c0] = g0 * cs + g1 * sn;
                        row[c1] = -g0 * sn + g1 * cs;
                    }
                }
                accumulate(&mut grads, nodes, *a, ga);
            }
        }
    }
    leaves
}

fn sum_rows(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = yi * (gi - dot);
    }
}
