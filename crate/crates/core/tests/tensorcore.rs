use std::sync::Arc;

use approx::assert_abs_diff_eq;
use multiway::tensor::{grad_check, Op, SoftmaxMask, Tape, Tensor};
use multiway::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

fn forward(op: Op<f64>, inputs: &[Tensor<f64>]) -> Tensor<f64> {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone()).unwrap()).collect();
    let out = tape.apply(op, &vars).unwrap();
    tape.value(out).clone()
}

#[test]
fn matmul_identity() {
    let out = forward(Op::MatMul, &[t(&[2, 2], &[1., 2., 3., 4.]), t(&[2, 2], &[1., 0., 0., 1.])]);
    assert_eq!(out.data(), &[1., 2., 3., 4.]);
}

#[test]
fn softmax_uniform_for_equal_logits() {
    let out = forward(Op::Softmax { axis: 0, mask: None }, &[t(&[3], &[0., 0., 0.])]);
    for v in out.data() {
        assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
    }
}

#[test]
fn layer_norm_matches_hand_value() {
    let out = forward(
        Op::LayerNorm { eps: 1e-5 },
        &[t(&[3], &[2., 4., 6.]), t(&[3], &[1., 1., 1.]), t(&[3], &[0., 0., 0.])],
    );
    let expected = [-1.2247, 0.0, 1.2247];
    for (a, b) in out.data().iter().zip(expected) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-3);
    }
}

#[test]
fn backward_square_sum() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1., 2., 3.]), true).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2., 4., 6.]);
}

#[test]
fn backward_matmul_sum_is_ones_times_bt() {
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[4, 2], 2);
    let mut tape = Tape::new();
    let va = tape.leaf(a.clone(), true).unwrap();
    let vb = tape.leaf(b.clone(), true).unwrap();
    let c = tape.matmul(va, vb).unwrap();
    let loss = tape.sum(c).unwrap();
    let grads = tape.backward(loss).unwrap();
    // ones(3×2)·Bᵀ: every row equals the row sums of B.
    let ga = grads.get(va).unwrap();
    for i in 0..3 {
        for p in 0..4 {
            let expect = b.data()[p * 2] + b.data()[p * 2 + 1];
            assert_abs_diff_eq!(ga.data()[i * 4 + p], expect, epsilon = 1e-12);
        }
    }
    // Aᵀ·ones: column sums of A.
    let gb = grads.get(vb).unwrap();
    for p in 0..4 {
        let expect: f64 = (0..3).map(|i| a.data()[i * 4 + p]).sum();
        assert_abs_diff_eq!(gb.data()[p * 2], expect, epsilon = 1e-12);
        assert_abs_diff_eq!(gb.data()[p * 2 + 1], expect, epsilon = 1e-12);
    }
}

#[test]
fn frozen_leaf_has_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1., 2.]), true).unwrap();
    let c = tape.leaf(t(&[2], &[3., 4.]), false).unwrap();
    let y = tape.mul(x, c).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.contains(x));
    assert!(!grads.contains(c));
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1., 2.]), true).unwrap();
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(rand_t(&[2, 3], 0)).unwrap();
    let b = tape.constant(rand_t(&[2, 3], 1)).unwrap();
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn non_finite_inputs_fail_fast() {
    let mut tape = Tape::<f64>::new();
    assert!(matches!(
        tape.leaf(t(&[2], &[1.0, f64::NAN]), true),
        Err(Error::NonFinite { .. })
    ));
    let big = tape.constant(t(&[1], &[1000.0])).unwrap();
    assert!(matches!(tape.exp(big), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn l2_normalize_rejects_zero_vector() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::<f64>::zeros(&[3])).unwrap();
    assert!(tape.l2_normalize(z).is_err());
}

#[test]
fn masked_softmax_gives_one_hot_for_single_allowed_column() {
    let mut tape = Tape::new();
    let x = tape.constant(rand_t(&[2, 3], 3)).unwrap();
    let mask = SoftmaxMask {
        rows: 2,
        cols: 3,
        allowed: Arc::new(vec![false, true, false, true, true, true]),
    };
    let y = tape.masked_softmax(x, mask).unwrap();
    assert_eq!(&tape.value(y).data()[..3], &[0.0, 1.0, 0.0]);
}

#[test]
fn grad_check_rejects_bad_step_and_leaf() {
    assert!(grad_check(&Op::Gelu, &[rand_t(&[3], 0)], 1e-2).is_err());
    assert!(grad_check(&Op::Leaf, &[rand_t(&[3], 0)], 1e-5).is_err());
}

#[test]
fn grad_check_examples() {
    let mm = grad_check(&Op::MatMul, &[rand_t(&[3, 4], 11), rand_t(&[4, 2], 12)], 1e-5).unwrap();
    assert!(mm < 1e-6, "matmul {mm}");
    let ce = grad_check(
        &Op::CrossEntropy { targets: Arc::new(vec![5]), smoothing: 0.0 },
        &[rand_t(&[1, 8], 13)],
        1e-5,
    )
    .unwrap();
    assert!(ce < 1e-6, "cross-entropy {ce}");
    let ln = grad_check(
        &Op::LayerNorm { eps: 1e-5 },
        &[rand_t(&[16], 14), rand_t(&[16], 15), rand_t(&[16], 16)],
        1e-5,
    )
    .unwrap();
    assert!(ln < 1e-5, "layer-norm {ln}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9) {
        let out = forward(Op::Softmax { axis: 1, mask: None }, &[rand_t(&[rows, cols], seed)]);
        for r in 0..rows {
            let s: f64 = out.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9) {
        let out = forward(Op::L2Normalize, &[rand_t(&[rows, cols], seed)]);
        for r in 0..rows {
            let n: f64 = out.data()[r * cols..(r + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn apply_is_deterministic(seed in any::<u64>()) {
        let inputs = [rand_t(&[4, 5], seed), rand_t(&[5, 3], seed ^ 1)];
        let a = forward(Op::MatMul, &inputs);
        let b = forward(Op::MatMul, &inputs);
        prop_assert!(a.bit_eq(&b));
    }
}
