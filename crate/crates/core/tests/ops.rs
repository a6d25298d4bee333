//! Worked examples and invariants for the graph operations.

use proptest::prelude::*;

use sidecue::autodiff::Graph;
use sidecue::error::Error;
use sidecue::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_projector() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let proj = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let n = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let y = g.matmul(proj, n).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_gradient_of_sum() {
    let mut g = Graph::<f64>::new();
    let a = g.param(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let y = g.matmul(a, b).unwrap();
    let s = g.sum_all(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn softmax_symmetry_and_stability() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert!(close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-15));
    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(t(&[2], &[1.0, 1.0]));
    let bias = g.constant(t(&[2], &[0.0, 0.0]));
    let constant = g.constant(t(&[2], &[4.0, 4.0]));
    let y = g.layer_norm(constant, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    let x = g.constant(t(&[2], &[1.0, 3.0]));
    let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
    assert!(close(g.value(y).data(), &[-1.0, 1.0], 1e-15));
}

#[test]
fn conv2d_identity_and_box_sum() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 3, 3], &(1..=9).map(f64::from).collect::<Vec<_>>()));
    let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv2d(x, one, None, 0, 1).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    let ones = g.constant(Tensor::full(vec![1, 3, 3], 1.0));
    let box3 = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, box3, None, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 3]);
    assert_eq!(g.value(y).at(&[0, 1, 1]), 9.0);
    assert_eq!(g.value(y).at(&[0, 0, 0]), 4.0);
}

#[test]
fn attention_examples() {
    let mut g = Graph::<f64>::new();
    // a single key: the output is that key's value row whatever the query
    let q = g.constant(t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, 1.0]));
    let k = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let v = g.constant(t(&[1, 2], &[7.0, -2.0]));
    let y = g.attention(q, k, v).unwrap();
    assert_eq!(g.value(y).data(), &[7.0, -2.0, 7.0, -2.0]);
    // identical keys: uniform mean of the values
    let k = g.constant(t(&[3, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
    let v = g.constant(t(&[3, 2], &[1.0, 0.0, 2.0, 3.0, 6.0, -3.0]));
    let y = g.attention(q, k, v).unwrap();
    assert!(close(g.value(y).data(), &[3.0, 0.0, 3.0, 0.0], 1e-12));
}

#[test]
fn cosine_similarity_examples() {
    let mut g = Graph::<f64>::new();
    let e1 = g.constant(t(&[2], &[1.0, 0.0]));
    let e2 = g.constant(t(&[2], &[0.0, 1.0]));
    let d = g.constant(t(&[2], &[1.0, 1.0]));
    let same = g.cosine_similarity(e1, e1).unwrap();
    let orth = g.cosine_similarity(e1, e2).unwrap();
    let diag = g.cosine_similarity(d, e1).unwrap();
    assert_eq!(g.value(same).item().unwrap(), 1.0);
    assert_eq!(g.value(orth).item().unwrap(), 0.0);
    assert!((g.value(diag).item().unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    let zero = g.constant(t(&[2], &[0.0, 0.0]));
    assert!(matches!(g.cosine_similarity(zero, e1), Err(Error::Degenerate { .. })));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.5));
    let grads = g.backward(x).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum_all(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn non_finite_values_are_reported() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[1], &[-1.0]));
    assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[2, 3], &[0.0; 6]));
    let b = g.constant(t(&[2, 3], &[0.0; 6]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    let c = g.constant(t(&[4], &[0.0; 4]));
    assert!(matches!(g.add(a, c), Err(Error::Dimension { .. })));
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, n)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in vec_strategy(12)) {
        let mut g = Graph::<f64>::new();
        let v = g.constant(t(&[3, 4], &x));
        let y = g.softmax(v, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax(x in vec_strategy(6)) {
        let mut g = Graph::<f64>::new();
        let v = g.constant(t(&[6], &x));
        let a = g.log_softmax(v, 0).unwrap();
        let b = g.softmax(v, 0).unwrap();
        for (la, pb) in g.value(a).data().iter().zip(g.value(b).data()) {
            if *pb > 1e-300 {
                prop_assert!((la - pb.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn l2_normalized_rows_have_unit_norm(x in vec_strategy(8)) {
        prop_assume!(x.chunks(4).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let mut g = Graph::<f64>::new();
        let v = g.constant(t(&[2, 4], &x));
        let y = g.l2_normalize(v, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(x in vec_strategy(24)) {
        let mut g = Graph::<f64>::new();
        let v = g.constant(t(&[2, 3, 4], &x));
        let p = g.permute(v, &[2, 0, 1]).unwrap();
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(g.value(back).data(), g.value(v).data());
    }

    #[test]
    fn sigmoid_and_log_sigmoid_agree(z in -40.0f64..40.0) {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::scalar(z));
        let s = g.sigmoid(v).unwrap();
        let ls = g.log_sigmoid(v).unwrap();
        let (s, ls) = (g.value(s).item().unwrap(), g.value(ls).item().unwrap());
        prop_assert!((ls.exp() - s).abs() < 1e-12);
    }
}
