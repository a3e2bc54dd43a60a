use super::*;
use crate::testutil::{central_diff, max_rel_err, uniform};

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Runs `build` on a fresh tape with `x` as a grad-tracking leaf, returning
/// the scalar value and d/dx.
fn eval_with_grad(
    shape: &[usize],
    x: &[f64],
    build: &dyn Fn(&mut Tape, Var) -> Var,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let leaf = tape.leaf(
        Tensor::new(shape.to_vec(), x.to_vec())
            .unwrap()
            .with_requires_grad(true),
    );
    let out = build(&mut tape, leaf);
    let value = tape.value(out).item();
    tape.backward(out).unwrap();
    (value, tape.grad(leaf).unwrap().to_vec())
}

fn check_gradient(shape: &[usize], seed: u64, build: &dyn Fn(&mut Tape, Var) -> Var) {
    let n: usize = shape.iter().product();
    let x = uniform(n, seed);
    let (_, analytic) = eval_with_grad(shape, &x, build);
    let numeric = central_diff(&x, |p| eval_with_grad(shape, p, build).0);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::new();
    let eye = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = tape.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(mat(&[&[1.0, 2.0]]));
    let b = tape.constant(mat(&[&[3.0], &[4.0]]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 1]);
    assert_eq!(tape.value(out).item(), 11.0);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let b = Tensor::new(vec![4, 2], uniform(8, 11)).unwrap();
    check_gradient(&[3, 4], 10, &|t, x| {
        let bv = t.constant(b.clone());
        let c = t.matmul(x, bv).unwrap();
        t.sum(c).unwrap()
    });
    let a = Tensor::new(vec![3, 4], uniform(12, 12)).unwrap();
    check_gradient(&[4, 2], 13, &|t, x| {
        let av = t.constant(a.clone());
        let c = t.matmul(av, x).unwrap();
        t.sum(c).unwrap()
    });
}

#[test]
fn matvec_and_vecmat_gradients() {
    let w = Tensor::new(vec![3, 4], uniform(12, 21)).unwrap();
    check_gradient(&[4], 22, &|t, x| {
        let wv = t.constant(w.clone());
        let y = t.matmul(wv, x).unwrap();
        let y = t.tanh(y).unwrap();
        t.sum(y).unwrap()
    });
    check_gradient(&[3], 23, &|t, x| {
        let wv = t.constant(w.clone());
        let y = t.matmul(x, wv).unwrap();
        let y = t.sigmoid(y).unwrap();
        t.sum(y).unwrap()
    });
}

#[test]
fn elementwise_values() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    let th = tape.tanh(z).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);
    assert_eq!(tape.value(th).item(), 0.0);

    let (_, g) = eval_with_grad(&[], &[0.0], &|t, x| t.sigmoid(x).unwrap());
    assert_eq!(g[0], 0.25);
    let numeric = central_diff(&[0.0], |p| 1.0 / (1.0 + (-p[0]).exp()));
    assert!((numeric[0] - 0.25).abs() < 1e-10);
}

#[test]
fn elementwise_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, b), Err(crate::Error::Shape { .. })));
    assert!(tape.mul(a, b).is_err());
}

#[test]
fn elementwise_gradients() {
    let other = Tensor::new(vec![5], uniform(5, 31)).unwrap();
    for (k, op) in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul].into_iter().enumerate() {
        let other = other.clone();
        check_gradient(&[5], 32 + k as u64, &move |t, x| {
            let o = t.constant(other.clone());
            let y = t.binary(op, x, o).unwrap();
            let y = t.binary(op, o, y).unwrap();
            let y = t.tanh(y).unwrap();
            t.sum(y).unwrap()
        });
    }
    for (k, op) in [UnaryOp::Sigmoid, UnaryOp::Tanh, UnaryOp::Scale(-1.7), UnaryOp::AddScalar(0.3)]
        .into_iter()
        .enumerate()
    {
        check_gradient(&[6], 40 + k as u64, &move |t, x| {
            let y = t.unary(op, x).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y).unwrap()
        });
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    let x = [0.7, -0.4, 0.2, -0.9];
    let (_, g) = eval_with_grad(&[4], &x, &|t, v| {
        let r = t.relu(v).unwrap();
        let r = t.mul(r, r).unwrap();
        t.sum(r).unwrap()
    });
    let numeric = central_diff(&x, |p| p.iter().map(|v| v.max(0.0).powi(2)).sum());
    assert!(max_rel_err(&g, &numeric) < 1e-6);
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_values(&[0.0, 0.0]), vec![0.5, 0.5]);
    for c in [-50.0, 0.0, 3.7, 800.0] {
        for v in softmax_values(&[c, c, c]) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
    // reference: direct exp / Σexp, no max shift
    let scores = [1.0f64, 2.0, 3.0];
    let denom: f64 = scores.iter().map(|s| s.exp()).sum();
    let got = softmax_values(&scores);
    for (g, s) in got.iter().zip(scores) {
        assert!((g - s.exp() / denom).abs() < 1e-12);
    }
    assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_rejects_empty() {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::vector(vec![]));
    assert!(matches!(tape.softmax(e), Err(crate::Error::Empty(_))));
}

#[test]
fn softmax_and_log_softmax_gradients() {
    let weights = Tensor::vector(uniform(5, 51));
    let w2 = weights.clone();
    check_gradient(&[5], 52, &move |t, x| {
        let s = t.softmax(x).unwrap();
        let w = t.constant(weights.clone());
        let y = t.mul(s, w).unwrap();
        t.sum(y).unwrap()
    });
    check_gradient(&[5], 53, &move |t, x| {
        let s = t.log_softmax(x).unwrap();
        let w = t.constant(w2.clone());
        let y = t.mul(s, w).unwrap();
        t.sum(y).unwrap()
    });
}

#[test]
fn concat_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector((0..32).map(f64::from).collect()));
    let single = tape.concat(&[a], 0).unwrap();
    assert_eq!(tape.value(single), tape.value(a));
    let b = tape.constant(Tensor::vector(vec![-1.0; 32]));
    let ab = tape.concat(&[a, b], 0).unwrap();
    let v = tape.value(ab);
    assert_eq!(v.shape(), &[64]);
    assert_eq!(&v.data()[..32], tape.value(a).data());
    assert_eq!(&v.data()[32..], &[-1.0; 32]);

    let m = tape.constant(Tensor::zeros(&[2, 3]));
    let n = tape.constant(Tensor::zeros(&[3, 3]));
    assert!(tape.concat(&[m, n], 1).is_err());
    let rows = tape.concat(&[m, n], 0).unwrap();
    assert_eq!(tape.shape(rows), &[5, 3]);
}

#[test]
fn concat_gradient_splits_back() {
    let other = Tensor::new(vec![2, 2], uniform(4, 61)).unwrap();
    let o2 = other.clone();
    let weights = Tensor::new(vec![2, 5], uniform(10, 62)).unwrap();
    check_gradient(&[2, 3], 63, &move |t, x| {
        let o = t.constant(other.clone());
        let c = t.concat(&[x, o], 1).unwrap();
        let w = t.constant(weights.clone());
        let y = t.mul(c, w).unwrap();
        let y = t.tanh(y).unwrap();
        t.sum(y).unwrap()
    });
    check_gradient(&[3, 2], 64, &move |t, x| {
        let o = t.constant(o2.clone());
        let c = t.concat(&[o, x], 0).unwrap();
        let c = t.mul(c, c).unwrap();
        t.sum(c).unwrap()
    });
}

#[test]
fn structural_op_gradients() {
    check_gradient(&[3, 4], 71, &|t, x| {
        let tr = t.transpose(x).unwrap();
        let r = t.row(tr, 2).unwrap();
        let s = t.slice(r, 1, 2).unwrap();
        let s = t.mul(s, s).unwrap();
        let n = t.norm(x).unwrap();
        let s = t.sum(s).unwrap();
        t.add(s, n).unwrap()
    });
    check_gradient(&[6], 72, &|t, x| {
        let a = t.slice(x, 0, 3).unwrap();
        let b = t.slice(x, 3, 3).unwrap();
        let m = t.stack(&[a, b, a]).unwrap();
        let m = t.reshape(m, &[9]).unwrap();
        let m = t.tanh(m).unwrap();
        t.sum(m).unwrap()
    });
}

#[test]
fn backward_sum_gives_ones() {
    let (_, g) = eval_with_grad(&[2, 3], &[0.3; 6], &|t, x| t.sum(x).unwrap());
    assert_eq!(g, vec![1.0; 6]);
}

#[test]
fn backward_quadratic_form() {
    let (v, g) = eval_with_grad(&[2], &[1.0, 2.0], &|t, x| t.matmul(x, x).unwrap());
    assert_eq!(v, 5.0);
    assert_eq!(g, vec![2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
    assert!(tape.backward(x).is_err());
}

#[test]
fn backward_accumulates_across_calls() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
    let y = tape.sum(x).unwrap();
    tape.backward(y).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn diamond_graph_sums_both_branches() {
    // x feeds a = 3x and b = x², loss = Σ(a + b); d/dx = 3 + 2x
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -1.0]).with_requires_grad(true));
    let a = tape.scale(x, 3.0).unwrap();
    let b = tape.mul(x, x).unwrap();
    let s = tape.add(a, b).unwrap();
    let loss = tape.sum(s).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 1.0]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1e300]));
    let err = tape.mul(x, x).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite { op: "mul" }));
}

#[test]
fn tied_parameters_share_one_leaf() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, -2.0]));
    let mut g = Graph::new(&store);
    let a = g.param(id);
    let b = g.param(id);
    assert_eq!(a, b);
    let p = g.mul(a, b).unwrap();
    let loss = g.sum(p).unwrap();
    g.backward(loss).unwrap();
    let tape = g.into_tape();
    store.accumulate_from(&tape);
    assert_eq!(store.get(id).tensor.grad().unwrap(), &[2.0, -4.0]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            scores in prop::collection::vec(-50.0f64..50.0, 1..20),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax_values(&scores);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v > 0.0));
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let q = softmax_values(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
