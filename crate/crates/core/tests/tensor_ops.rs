mod common;

use common::{grad_check, random, rng, weighted_sum};
use proptest::prelude::*;
use rand::Rng;
use seqrec::tensor::{Mask, Tape, Tensor};
use seqrec::Error;

const TRIALS: u64 = 20;
const TOL: f64 = 1e-4;

fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_identity_and_hand_example() {
    let tape = Tape::<f64>::new();
    let m = tape.constant(t(&[vec![1.5, -2.0], vec![0.25, 7.0]]));
    let i = tape.constant(Tensor::identity(2));
    let out = tape.matmul(i, m).unwrap();
    assert_eq!(*tape.value(out), *tape.value(m));

    let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = tape.constant(t(&[vec![1.0], vec![1.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::<f64>::zeros([2, 3]));
    let b = tape.constant(Tensor::<f64>::zeros([2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_sum_output() {
    for seed in 0..TRIALS {
        let mut r = rng(seed);
        let inputs = [random(&[5, 4], &mut r), random(&[4, 3], &mut r)];
        let worst = grad_check(&inputs, |tape, v| {
            let c = tape.matmul(v[0], v[1]).unwrap();
            tape.sum(c)
        });
        assert!(worst <= 1e-6, "seed {seed}: {worst}");
    }
}

#[test]
fn batched_matmul_gradients_with_shared_operands() {
    for seed in 0..TRIALS {
        let mut r = rng(100 + seed);
        // batch × batch
        let inputs = [random(&[2, 3, 4], &mut r), random(&[2, 4, 2], &mut r)];
        let worst = grad_check(&inputs, |tape, v| {
            let c = tape.matmul(v[0], v[1]).unwrap();
            weighted_sum(tape, c, seed)
        });
        assert!(worst <= TOL, "batched: {worst}");
        // batch × shared
        let inputs = [random(&[3, 2, 4], &mut r), random(&[4, 3], &mut r)];
        let worst = grad_check(&inputs, |tape, v| {
            let c = tape.matmul(v[0], v[1]).unwrap();
            weighted_sum(tape, c, seed)
        });
        assert!(worst <= TOL, "rhs shared: {worst}");
        // shared × batch
        let inputs = [random(&[3, 3], &mut r), random(&[2, 3, 4], &mut r)];
        let worst = grad_check(&inputs, |tape, v| {
            let c = tape.matmul(v[0], v[1]).unwrap();
            weighted_sum(tape, c, seed)
        });
        assert!(worst <= TOL, "lhs shared: {worst}");
    }
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[vec![0.0, 0.0, 0.0]]));
    let y = tape.softmax_rows(x, None).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(t(&[vec![0.3, 5.0]]));
    let mask = Mask::new([1, 2], vec![true, false]).unwrap();
    let y = tape.softmax_rows(x, Some(&mask)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

    // scalar-loop oracle
    let x = tape.constant(t(&[vec![1.0, 2.0, 3.0]]));
    let y = tape.softmax_rows(x, None).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (k, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((tape.value(y).data()[k] - v.exp() / z).abs() <= 1e-12);
    }
}

#[test]
fn softmax_fully_masked_row_is_a_contract_error() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let mask = Mask::new([2, 2], vec![true, false, false, false]).unwrap();
    assert!(matches!(
        tape.softmax_rows(x, Some(&mask)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn softmax_broadcast_mask_and_gradient() {
    for seed in 0..TRIALS {
        let mut r = rng(200 + seed);
        let inputs = [random(&[2, 4, 4], &mut r)];
        let mask = Mask::causal(4);
        let worst = grad_check(&inputs, |tape, v| {
            let y = tape.softmax_rows(v[0], Some(&mask)).unwrap();
            weighted_sum(tape, y, seed)
        });
        assert!(worst <= TOL, "{worst}");
    }
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut r = rng(7);
    let tape = Tape::<f64>::new();
    let x = tape.variable(random(&[3, 5], &mut r));
    let y = tape.softmax_rows(x, None).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    assert!(g.data().iter().all(|v| v.abs() <= 1e-10));
}

#[test]
fn elu_plus_one_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64([3], &[0.0, 2.0, -20.0]).unwrap());
    let y = tape.elu_plus_one(x);
    let y = tape.value(y);
    assert_eq!(y.data()[0], 1.0);
    assert_eq!(y.data()[1], 3.0);
    assert!((y.data()[2] - (-20.0f64).exp()).abs() < 1e-20);
    assert!(y.data()[2] > 0.0);
    assert!((y.data()[2] - 2.06e-9).abs() < 1e-11);
}

#[test]
fn backward_of_sum_is_all_ones_and_accumulates() {
    let tape = Tape::<f64>::new();
    let w = tape.variable(Tensor::<f64>::zeros([2, 3]));
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 1.0));
    tape.backward(s).unwrap();
    assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 2.0));
    tape.zero_grad();
    assert!(tape.grad(w).is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let tape = Tape::<f64>::new();
    let w = tape.variable(Tensor::<f64>::zeros([2]));
    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut r = rng(3);
        let tape = Tape::<f64>::new();
        let a = tape.variable(random(&[3, 4, 4], &mut r));
        let b = tape.variable(random(&[4, 4], &mut r));
        let c = tape.matmul(a, b).unwrap();
        let c = tape.layer_norm(c, 1e-8);
        let c = tape.softmax_rows(c, Some(&Mask::causal(4))).unwrap();
        let root = weighted_sum(&tape, c, 1);
        tape.backward(root).unwrap();
        (tape.grad(a).unwrap(), tape.grad(b).unwrap())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data(), a2.data());
    assert_eq!(b1.data(), b2.data());
}

/// Runs a unary op through `TRIALS` finite-difference checks on inputs drawn
/// by `draw`.
fn check_unary(
    name: &str,
    draw: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Tensor<f64>,
    op: impl Fn(&Tape<f64>, seqrec::tensor::Var) -> seqrec::tensor::Var,
) {
    for seed in 0..TRIALS {
        let mut r = rng(1000 + seed);
        let inputs = [draw(&mut r)];
        let worst = grad_check(&inputs, |tape, v| {
            let y = op(tape, v[0]);
            weighted_sum(tape, y, seed)
        });
        assert!(worst <= TOL, "{name} seed {seed}: {worst}");
    }
}

fn positive(r: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform([3, 4], 0.1, 2.0, r)
}

fn away_from_zero(r: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(&[3, 4], r);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    t
}

#[test]
fn elementwise_gradients() {
    check_unary("sigmoid", |r| random(&[3, 4], r), |t, x| t.sigmoid(x));
    check_unary("log_sigmoid", |r| Tensor::uniform([3, 4], -8.0, 8.0, r), |t, x| t.log_sigmoid(x));
    check_unary("log", positive, |t, x| t.log(x).unwrap());
    check_unary("sqrt", positive, |t, x| t.sqrt(x).unwrap());
    check_unary("relu", away_from_zero, |t, x| t.relu(x));
    check_unary("elu_plus_one", away_from_zero, |t, x| t.elu_plus_one(x));
    check_unary("scale", |r| random(&[2, 5], r), |t, x| t.scale(x, -1.7));
    check_unary("transpose", |r| random(&[2, 3, 4], r), |t, x| t.transpose(x).unwrap());
    check_unary("sum_last", |r| random(&[2, 3, 4], r), |t, x| t.sum_last(x));
    check_unary("layer_norm", |r| random(&[3, 6], r), |t, x| t.layer_norm(x, 1e-8));
    check_unary("reshape", |r| random(&[2, 6], r), |t, x| t.reshape(x, [3, 4]).unwrap());
    check_unary("slice", |r| random(&[2, 4, 5], r), |t, x| t.slice(x, 1..3, 2..5).unwrap());
    check_unary("mean", |r| random(&[3, 3], r), |t, x| t.mean(x));
}

#[test]
fn binary_gradients_with_suffix_broadcast() {
    for seed in 0..TRIALS {
        let mut r = rng(2000 + seed);
        for rhs in [[2, 3, 4].as_slice(), &[3, 4], &[4]] {
            let inputs = [random(&[2, 3, 4], &mut r), random(rhs, &mut r)];
            for (name, k) in [("add", 0), ("sub", 1), ("mul", 2)] {
                let worst = grad_check(&inputs, |tape, v| {
                    let y = match k {
                        0 => tape.add(v[0], v[1]),
                        1 => tape.sub(v[0], v[1]),
                        _ => tape.mul(v[0], v[1]),
                    }
                    .unwrap();
                    weighted_sum(tape, y, seed)
                });
                assert!(worst <= TOL, "{name} {rhs:?}: {worst}");
            }
        }
    }
}

#[test]
fn concat_gradients() {
    for seed in 0..TRIALS {
        let mut r = rng(3000 + seed);
        let inputs = [
            random(&[2, 3, 2], &mut r),
            random(&[2, 3, 3], &mut r),
            random(&[2, 1, 2], &mut r),
        ];
        let worst = grad_check(&inputs, |tape, v| {
            let c = tape.concat_cols(&[v[0], v[1]]).unwrap();
            let d = tape.concat_rows(&[v[0], v[2]]).unwrap();
            let a = weighted_sum(tape, c, seed);
            let b = weighted_sum(tape, d, seed + 1);
            tape.add(a, b).unwrap()
        });
        assert!(worst <= TOL, "{worst}");
    }
}

#[test]
fn gather_scatter_gradient() {
    for seed in 0..TRIALS {
        let mut r = rng(4000 + seed);
        let ids: Vec<usize> = (0..7).map(|_| r.gen_range(0..5)).collect();
        let inputs = [random(&[5, 3], &mut r)];
        let worst = grad_check(&inputs, |tape, v| {
            let g = tape.gather_rows(v[0], &ids).unwrap();
            weighted_sum(tape, g, seed)
        });
        assert!(worst <= TOL, "{worst}");
    }
    let tape = Tape::<f64>::new();
    let table = tape.constant(Tensor::<f64>::zeros([3, 2]));
    assert!(tape.gather_rows(table, &[3]).is_err());
}

#[test]
fn distance_gradients() {
    for seed in 0..TRIALS {
        let mut r = rng(5000 + seed);
        let inputs = [random(&[2, 3, 4], &mut r), random(&[2, 5, 4], &mut r)];
        let worst = grad_check(&inputs, |tape, v| {
            let d = tape.pairwise_distance(v[0], v[1]).unwrap();
            weighted_sum(tape, d, seed)
        });
        assert!(worst <= TOL, "pairwise: {worst}");
        let inputs = [random(&[2, 3, 4], &mut r), random(&[5, 4], &mut r)];
        let worst = grad_check(&inputs, |tape, v| {
            let d = tape.pairwise_distance(v[0], v[1]).unwrap();
            weighted_sum(tape, d, seed)
        });
        assert!(worst <= TOL, "pairwise shared: {worst}");
        let inputs = [random(&[3, 4], &mut r), random(&[3, 4], &mut r)];
        let worst = grad_check(&inputs, |tape, v| {
            let d = tape.row_distance(v[0], v[1]).unwrap();
            weighted_sum(tape, d, seed)
        });
        assert!(worst <= TOL, "row: {worst}");
    }
}

#[test]
fn dropout_train_and_eval() {
    let mut r = rng(9);
    let tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::<f64>::full([50, 40], 1.0));
    let same = tape.dropout::<rand_chacha::ChaCha8Rng>(x, 0.5, None).unwrap();
    assert_eq!(same, x);
    let y = tape.dropout(x, 0.25, Some(&mut r)).unwrap();
    let vals = tape.value(y).clone();
    let kept = vals.data().iter().filter(|&&v| v != 0.0).count() as f64 / 2000.0;
    assert!((kept - 0.75).abs() < 0.05, "{kept}");
    assert!(vals
        .data()
        .iter()
        .all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    assert!(tape.dropout(x, 1.0, Some(&mut r)).is_err());

    // gradient check with a fixed mask: the same seed reproduces it
    for seed in 0..TRIALS {
        let mut r = rng(6000 + seed);
        let inputs = [random(&[3, 4], &mut r)];
        let worst = grad_check(&inputs, |tape, v| {
            let mut m = rng(seed);
            let y = tape.dropout(v[0], 0.3, Some(&mut m)).unwrap();
            weighted_sum(tape, y, seed)
        });
        assert!(worst <= TOL, "{worst}");
    }
}

#[test]
fn preconditions_are_enforced() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64([2], &[1.0, -1.0]).unwrap());
    assert!(matches!(tape.sqrt(x), Err(Error::Contract(_))));
    assert!(matches!(tape.log(x), Err(Error::Contract(_))));
}

#[test]
fn f32_tape_works() {
    let tape = Tape::<f32>::new();
    let a = tape.variable(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.matmul(a, a).unwrap();
    let s = tape.sum(b);
    tape.backward(s).unwrap();
    assert_eq!(tape.item(s), 54.0f32);
    assert_eq!(tape.grad(a).unwrap().data(), &[7.0f32, 11.0, 9.0, 13.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12), seed in 0u64..1000) {
        let mut r = rng(seed);
        let mask_bits: Vec<bool> = (0..12).map(|i| i % 4 == 0 || r.gen_bool(0.6)).collect();
        let mask = Mask::new([3, 4], mask_bits.clone()).unwrap();
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([3, 4], vals).unwrap());
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        let y = tape.value(y);
        for row in 0..3 {
            let s: f64 = y.row(row).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            for c in 0..4 {
                let v = y.row(row)[c];
                prop_assert!((0.0..=1.0).contains(&v));
                if !mask_bits[row * 4 + c] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn elu_plus_one_is_strictly_positive(x in -700.0f64..700.0) {
        let tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::scalar(x));
        let y = tape.elu_plus_one(v);
        prop_assert!(tape.item(y) > 0.0);
    }
}
