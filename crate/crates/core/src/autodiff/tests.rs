use std::rc::Rc;

use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn t(rows: usize, cols: usize, seed: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|i| ((i as f64 + 1.0) * seed).sin())
            .collect(),
    )
    .unwrap()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(1, 4));
    assert_eq!(x.softmax_rows().value().data(), &[0.25; 4]);
}

#[test]
fn gradient_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let loss = x.square().sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn disconnected_leaf_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.param(t(2, 2, 0.3));
    let unused = tape.param(t(3, 1, 0.7));
    tape.backward(x.sum()).unwrap();
    assert_eq!(unused.grad().unwrap(), Tensor::zeros(3, 1));
}

#[test]
fn chain_of_adds_has_unit_gradient() {
    let tape = Tape::new();
    let x = tape.param(t(2, 3, 0.9));
    let c = tape.constant(t(2, 3, 0.4));
    let mut y = x;
    for _ in 0..5 {
        y = y.add(c).unwrap();
    }
    tape.backward(y.sum()).unwrap();
    assert_eq!(x.grad().unwrap(), Tensor::full(2, 3, 1.0));
}

#[test]
fn second_backward_requires_reset() {
    let tape = Tape::new();
    let x = tape.param(t(1, 2, 0.5));
    let loss = x.sum();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    tape.reset_grads();
    tape.backward(loss).unwrap();
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.param(t(2, 2, 0.5));
    assert!(matches!(
        tape.backward(x),
        Err(Error::NonScalarLoss { rows: 2, cols: 2 })
    ));
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let tape = Tape::new();
    let a = tape.constant(t(2, 3, 0.1));
    let b = tape.constant(t(2, 2, 0.2));
    let msg = a.add(b).unwrap_err().to_string();
    assert!(
        msg.contains("add") && msg.contains("2x3") && msg.contains("2x2"),
        "{msg}"
    );
    let msg = a.matmul(a).unwrap_err().to_string();
    assert!(msg.contains("matmul"), "{msg}");
}

#[test]
fn composite_softmax_matches_finite_differences() {
    let w = t(4, 3, 0.37);
    let v = t(1, 4, 1.3);
    let x = t(3, 1, 0.81);
    let err = finite_difference_check(
        |tape, x| {
            let w = tape.constant(w.clone());
            let v = tape.constant(v.clone());
            let logits = w.matmul(x)?.transpose();
            Ok(logits.softmax_rows().mul(v)?.sum())
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

fn check(f: impl for<'t> Fn(&'t Tape, Var<'t>) -> crate::Result<Var<'t>>, x: Tensor) {
    let err = finite_difference_check(f, &x, 1e-5).unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

fn weights<'t>(tape: &'t Tape, out: Var<'t>, seed: f64) -> crate::Result<Var<'t>> {
    let w = tape.constant(t(out.rows(), out.cols(), seed));
    Ok(out.mul(w)?.sum())
}

#[test]
fn every_primitive_passes_gradient_check() {
    let x = t(3, 4, 0.63);
    check(
        |tp, x| weights(tp, x.sub(tp.constant(t(3, 4, 0.2)))?, 1.1),
        x.clone(),
    );
    check(|tp, x| weights(tp, x.mul(x)?, 1.1), x.clone());
    check(
        |tp, x| weights(tp, x.add_row(x.slice_cols(0, 4)?.mean_rows())?, 0.4),
        x.clone(),
    );
    check(
        |tp, x| weights(tp, x.mul_row(x.sum_rows())?, 0.4),
        x.clone(),
    );
    check(
        |tp, x| weights(tp, x.mul_col(x.sum_cols())?, 0.4),
        x.clone(),
    );
    check(
        |tp, x| weights(tp, x.scale(-2.5).add_scalar(1.0), 0.3),
        x.clone(),
    );
    check(
        |tp, x| weights(tp, x.matmul(x.transpose())?, 0.3),
        x.clone(),
    );
    check(
        |tp, x| weights(tp, x.transpose().matmul(x)?, 0.3),
        x.clone(),
    );
    check(|tp, x| weights(tp, x.reshape(2, 6)?, 0.3), x.clone());
    check(
        |tp, x| weights(tp, tp.concat_cols(&[x, x.exp()])?, 0.3),
        x.clone(),
    );
    check(
        |tp, x| weights(tp, tp.concat_rows(&[x, x.tanh()])?, 0.3),
        x.clone(),
    );
    let idx: Rc<[usize]> = vec![2, 0, 2, 1, 2].into();
    check(
        move |tp, x| weights(tp, x.gather_rows(&idx)?, 0.3),
        x.clone(),
    );
    let idx: Rc<[usize]> = vec![1, 1, 0].into();
    check(
        move |tp, x| weights(tp, x.scatter_add_rows(&idx, 2)?, 0.3),
        x.clone(),
    );
    check(|tp, x| weights(tp, x.sigmoid(), 0.3), x.clone());
    check(|tp, x| weights(tp, x.silu(), 0.3), x.clone());
    check(
        |tp, x| weights(tp, x.square().add_scalar(0.5).rsqrt(), 0.3),
        x.clone(),
    );
    check(
        |tp, x| weights(tp, x.square().add_scalar(0.5).recip(), 0.3),
        x.clone(),
    );
    check(|tp, x| weights(tp, x.softmax_rows(), 0.3), x.clone());
    check(|tp, x| weights(tp, x.softmax_cols(), 0.3), x.clone());
    check(|_, x| Ok(x.mean_cols().sum().add(x.mean())?), x.clone());
    let mask: Rc<[bool]> = (0..12).map(|i| i % 3 == 1).collect::<Vec<_>>().into();
    check(
        move |tp, x| {
            weights(
                tp,
                x.masked_fill(&mask, f64::NEG_INFINITY)?.softmax_rows(),
                0.3,
            )
        },
        x.clone(),
    );
    let offsets: Rc<[usize]> = vec![0, 2, 2, 3].into();
    check(
        move |tp, x| weights(tp, x.segment_softmax(&offsets)?, 0.3),
        x.clone(),
    );
    check(
        |tp, x| weights(tp, x.grouped_row_dot(x.exp(), 2)?, 0.3),
        x.clone(),
    );
    check(
        |tp, x| weights(tp, x.grouped_scale(x.slice_cols(1, 3)?)?, 0.3),
        x.clone(),
    );
    let table = Rc::new(RotationTable {
        pairs: vec![(0, 2), (1, 3)],
        cos: (0..6).map(|i| (i as f64 * 0.7).cos()).collect(),
        sin: (0..6).map(|i| (i as f64 * 0.7).sin()).collect(),
        rows: 3,
    });
    check(move |tp, x| weights(tp, x.rotate_pairs(&table)?, 0.3), x);
}

#[test]
fn bind_from_flat_reproduces_bound_forward() {
    let mut store = ParamStore::new();
    let a = store.add("a", t(2, 3, 0.3));
    let b = store.add("b", t(3, 1, 0.9));
    let f = |p: &Bound<'_>| p.var(a).matmul(p.var(b)).unwrap().square().sum().item();
    let tape = Tape::new();
    let direct = f(&store.bind(&tape));
    let flat = tape.param(store.to_flat());
    let via_flat = f(&store.bind_from_flat(flat).unwrap());
    assert_eq!(direct, via_flat);
    let mut copy = store.clone();
    copy.set_from_flat(store.to_flat().data()).unwrap();
    assert_eq!(copy, store);
}

#[test]
fn f32_mode_rounds_recorded_values() {
    let tape = Tape::with_precision(Precision::F32);
    let x = tape.constant(Tensor::scalar(0.1));
    assert_eq!(x.item(), 0.1f32 as f64);
    assert_eq!(x.scale(3.0).item(), (0.1f32 as f64 * 3.0) as f32 as f64);
}

proptest! {
    #[test]
    fn forward_ops_stay_finite(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(3, 4, vals).unwrap());
        let y = x.softmax_rows().add(x.tanh()).unwrap().add(x.silu()).unwrap()
            .add(x.sigmoid()).unwrap().add(x.softmax_cols()).unwrap();
        let z = x.square().add_scalar(1.0).rsqrt().mul(y).unwrap();
        prop_assert!(z.value().is_finite());
        tape.backward(z.sum()).unwrap();
        let g = x.grad().unwrap();
        prop_assert_eq!(g.shape(), x.shape());
        prop_assert!(g.is_finite());
    }
}
