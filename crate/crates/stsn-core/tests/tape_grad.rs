//! Finite-difference verification of every tape primitive, plus the
//! closed-form anchor cases and algebraic invariants of the engine.

use proptest::prelude::*;
use stsn_core::gradcheck::{check_gradient, spread_indices, DEFAULT_H};
use stsn_core::rng::Rng;
use stsn_core::tape::{BnMode, BnStats, Tape, Var};
use stsn_core::tensor::{Tensor, TensorError};

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// Random values bounded away from zero, for kinked/attenuating ops.
fn rand_away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
        sign * rng.uniform(0.2, 1.8)
    })
}

/// Runs `build` once for the analytic gradient of `param` and then feeds the
/// same graph construction to the central-difference checker. The loss mixes
/// the op output with a fixed random weight tensor so element-wise errors
/// cannot cancel.
fn fd_check<F>(param: &Tensor, build: F) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let mut tracked = param.clone();
    tracked.requires_grad = true;
    let p = tape.leaf(tracked);
    let loss = build(&mut tape, p).expect("build loss");
    assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
    tape.backward(loss).expect("backward");
    let analytic = tape.grad(p).expect("param gradient");

    let loss_fn = |t: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let p = tape.leaf(t.clone());
        let loss = build(&mut tape, p)?;
        Ok(tape.value(loss).item())
    };
    check_gradient(param, &analytic, loss_fn, DEFAULT_H, None).expect("gradient check")
}

/// Scalarizes `out` as mean(out * W) with a fixed pseudo-random W.
fn mix(tape: &mut Tape, out: Var, salt: u64) -> Result<Var, TensorError> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = Rng::new(salt ^ 0xabcdef);
    let w = tape.constant(Tensor::from_fn(&shape, |_| rng.uniform(-1.0, 1.0)));
    let prod = tape.mul(out, w)?;
    tape.mean(prod, None)
}

#[test]
fn grad_matmul_both_sides() {
    let mut rng = Rng::new(1);
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[4, 5], &mut rng, -1.0, 1.0);
    let b2 = b.clone();
    let err_a = fd_check(&a, move |tape, p| {
        let bc = tape.constant(b2.clone());
        let y = tape.matmul(p, bc)?;
        mix(tape, y, 11)
    });
    assert!(err_a < TOL, "matmul lhs err {err_a}");
    let a2 = a.clone();
    let err_b = fd_check(&b, move |tape, p| {
        let ac = tape.constant(a2.clone());
        let y = tape.matmul(ac, p)?;
        mix(tape, y, 12)
    });
    assert!(err_b < TOL, "matmul rhs err {err_b}");
}

#[test]
fn grad_add_bias() {
    let mut rng = Rng::new(2);
    let x = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[3], &mut rng, -1.0, 1.0);
    let b2 = b.clone();
    let err_x = fd_check(&x, move |tape, p| {
        let bc = tape.constant(b2.clone());
        let y = tape.add_bias(p, bc)?;
        mix(tape, y, 21)
    });
    assert!(err_x < TOL);
    let x2 = x.clone();
    let err_b = fd_check(&b, move |tape, p| {
        let xc = tape.constant(x2.clone());
        let y = tape.add_bias(xc, p)?;
        mix(tape, y, 22)
    });
    assert!(err_b < TOL);
}

#[test]
fn grad_conv2d_all_inputs() {
    let mut rng = Rng::new(3);
    let x = rand_tensor(&[2, 5, 4], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng, -0.5, 0.5);
    let b = rand_tensor(&[3], &mut rng, -0.5, 0.5);
    let (wc, bc) = (w.clone(), b.clone());
    let err_x = fd_check(&x, move |tape, p| {
        let wv = tape.constant(wc.clone());
        let bv = tape.constant(bc.clone());
        let y = tape.conv2d(p, wv, bv)?;
        mix(tape, y, 31)
    });
    assert!(err_x < TOL, "conv input err {err_x}");
    let (xc, bc) = (x.clone(), b.clone());
    let err_w = fd_check(&w, move |tape, p| {
        let xv = tape.constant(xc.clone());
        let bv = tape.constant(bc.clone());
        let y = tape.conv2d(xv, p, bv)?;
        mix(tape, y, 32)
    });
    assert!(err_w < TOL, "conv weight err {err_w}");
    let (xc, wc) = (x.clone(), w.clone());
    let err_b = fd_check(&b, move |tape, p| {
        let xv = tape.constant(xc.clone());
        let wv = tape.constant(wc.clone());
        let y = tape.conv2d(xv, wv, p)?;
        mix(tape, y, 33)
    });
    assert!(err_b < TOL, "conv bias err {err_b}");
}

#[test]
fn grad_batch_norm_train_and_eval() {
    let mut rng = Rng::new(4);
    let x = rand_tensor(&[2, 3, 3], &mut rng, -2.0, 2.0);
    let gamma = rand_tensor(&[2], &mut rng, 0.5, 1.5);
    let beta = rand_tensor(&[2], &mut rng, -0.5, 0.5);
    let stats = BnStats {
        mean: vec![0.3, -0.2],
        var: vec![1.4, 0.8],
    };
    for mode in [BnMode::Train, BnMode::Eval] {
        let (gc, bc, st) = (gamma.clone(), beta.clone(), stats.clone());
        let err_x = fd_check(&x, move |tape, p| {
            let g = tape.constant(gc.clone());
            let b = tape.constant(bc.clone());
            let (y, _) = tape.batch_norm2d(p, g, b, &st, mode, 1e-5, 0.1)?;
            mix(tape, y, 41)
        });
        assert!(err_x < TOL, "bn input err {err_x} in {mode:?}");
        let (xc, bc, st) = (x.clone(), beta.clone(), stats.clone());
        let err_g = fd_check(&gamma, move |tape, p| {
            let xv = tape.constant(xc.clone());
            let b = tape.constant(bc.clone());
            let (y, _) = tape.batch_norm2d(xv, p, b, &st, mode, 1e-5, 0.1)?;
            mix(tape, y, 42)
        });
        assert!(err_g < TOL, "bn gamma err {err_g} in {mode:?}");
        let (xc, gc, st) = (x.clone(), gamma.clone(), stats.clone());
        let err_b = fd_check(&beta, move |tape, p| {
            let xv = tape.constant(xc.clone());
            let g = tape.constant(gc.clone());
            let (y, _) = tape.batch_norm2d(xv, g, p, &st, mode, 1e-5, 0.1)?;
            mix(tape, y, 43)
        });
        assert!(err_b < TOL, "bn beta err {err_b} in {mode:?}");
    }
}

#[test]
fn grad_layer_norm_all_inputs() {
    let mut rng = Rng::new(5);
    let x = rand_tensor(&[4, 6], &mut rng, -2.0, 2.0);
    let gamma = rand_tensor(&[6], &mut rng, 0.5, 1.5);
    let beta = rand_tensor(&[6], &mut rng, -0.5, 0.5);
    let (gc, bc) = (gamma.clone(), beta.clone());
    let err_x = fd_check(&x, move |tape, p| {
        let g = tape.constant(gc.clone());
        let b = tape.constant(bc.clone());
        let y = tape.layer_norm(p, g, b, 1e-5)?;
        mix(tape, y, 51)
    });
    assert!(err_x < TOL, "ln input err {err_x}");
    let (xc, bc) = (x.clone(), beta.clone());
    let err_g = fd_check(&gamma, move |tape, p| {
        let xv = tape.constant(xc.clone());
        let b = tape.constant(bc.clone());
        let y = tape.layer_norm(xv, p, b, 1e-5)?;
        mix(tape, y, 52)
    });
    assert!(err_g < TOL);
    let (xc, gc) = (x.clone(), gamma.clone());
    let err_b = fd_check(&beta, move |tape, p| {
        let xv = tape.constant(xc.clone());
        let g = tape.constant(gc.clone());
        let y = tape.layer_norm(xv, g, p, 1e-5)?;
        mix(tape, y, 53)
    });
    assert!(err_b < TOL);
}

#[test]
fn grad_pointwise_ops() {
    let mut rng = Rng::new(6);
    let x = rand_away_from_zero(&[3, 4], &mut rng);
    for (salt, f) in [
        (61u64, 0usize), // gelu
        (62, 1),         // tanh
        (63, 2),         // abs
    ] {
        let err = fd_check(&x, move |tape, p| {
            let y = match f {
                0 => tape.gelu(p)?,
                1 => tape.tanh(p)?,
                _ => tape.abs(p)?,
            };
            mix(tape, y, salt)
        });
        assert!(err < TOL, "pointwise op {f} err {err}");
    }
}

#[test]
fn grad_softmax_log_softmax_both_axes() {
    let mut rng = Rng::new(7);
    let x = rand_tensor(&[3, 5], &mut rng, -2.0, 2.0);
    for axis in [0usize, 1] {
        let err = fd_check(&x, move |tape, p| {
            let y = tape.softmax(p, axis)?;
            mix(tape, y, 71 + axis as u64)
        });
        assert!(err < TOL, "softmax axis {axis} err {err}");
        let err = fd_check(&x, move |tape, p| {
            let y = tape.log_softmax(p, axis)?;
            mix(tape, y, 73 + axis as u64)
        });
        assert!(err < TOL, "log_softmax axis {axis} err {err}");
    }
}

#[test]
fn grad_arithmetic_and_shape_ops() {
    let mut rng = Rng::new(8);
    let x = rand_tensor(&[2, 3, 4], &mut rng, -1.0, 1.0);
    let other = rand_tensor(&[2, 3, 4], &mut rng, -1.0, 1.0);

    let oc = other.clone();
    let err = fd_check(&x, move |tape, p| {
        let o = tape.constant(oc.clone());
        let y = tape.add(p, o)?;
        mix(tape, y, 81)
    });
    assert!(err < TOL, "elem_add err {err}");

    let oc = other.clone();
    let err = fd_check(&x, move |tape, p| {
        let o = tape.constant(oc.clone());
        let y = tape.mul(p, o)?;
        mix(tape, y, 82)
    });
    assert!(err < TOL, "elem_mul err {err}");

    let err = fd_check(&x, move |tape, p| {
        let y = tape.scale(p, -1.7)?;
        mix(tape, y, 83)
    });
    assert!(err < TOL, "scalar_mul err {err}");

    // Square through aliased inputs: d(x*x)/dx must double-accumulate.
    let err = fd_check(&x, move |tape, p| {
        let y = tape.mul(p, p)?;
        mix(tape, y, 84)
    });
    assert!(err < TOL, "aliased square err {err}");

    let err = fd_check(&x, move |tape, p| {
        let y = tape.reshape(p, &[6, 4])?;
        let z = tape.transpose2d(y)?;
        mix(tape, z, 85)
    });
    assert!(err < TOL, "reshape/transpose err {err}");

    for axis in [0usize, 1, 2] {
        let err = fd_check(&x, move |tape, p| {
            let y = tape.mean(p, Some(axis))?;
            mix(tape, y, 86 + axis as u64)
        });
        assert!(err < TOL, "mean axis {axis} err {err}");
        let err = fd_check(&x, move |tape, p| {
            let y = tape.sum(p, Some(axis))?;
            mix(tape, y, 89 + axis as u64)
        });
        assert!(err < TOL, "sum axis {axis} err {err}");
    }
    let err = fd_check(&x, move |tape, p| tape.mean(p, None));
    assert!(err < TOL, "mean all err {err}");
}

#[test]
fn grad_concat_slice_gather() {
    let mut rng = Rng::new(9);
    let x = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
    let other = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);

    let oc = other.clone();
    for axis in [0usize, 1] {
        let oc2 = if axis == 0 {
            oc.clone()
        } else {
            rand_tensor(&[4, 2], &mut rng, -1.0, 1.0)
        };
        let err = fd_check(&x, move |tape, p| {
            let o = tape.constant(oc2.clone());
            let y = tape.concat(&[p, o], axis)?;
            mix(tape, y, 91 + axis as u64)
        });
        assert!(err < TOL, "concat axis {axis} err {err}");
    }

    let err = fd_check(&x, move |tape, p| {
        let y = tape.slice(p, 0, 1, 2)?;
        mix(tape, y, 93)
    });
    assert!(err < TOL, "slice rows err {err}");
    let err = fd_check(&x, move |tape, p| {
        let y = tape.slice(p, 1, 1, 2)?;
        mix(tape, y, 94)
    });
    assert!(err < TOL, "slice cols err {err}");

    // Repeated indices must scatter-add.
    let err = fd_check(&x, move |tape, p| {
        let y = tape.gather_rows(p, &[0, 2, 2, 3, 0])?;
        mix(tape, y, 95)
    });
    assert!(err < TOL, "gather err {err}");

    let row = rand_tensor(&[1, 5], &mut rng, -1.0, 1.0);
    let err = fd_check(&row, move |tape, p| {
        let y = tape.broadcast_rows(p, 7)?;
        mix(tape, y, 96)
    });
    assert!(err < TOL, "broadcast_rows err {err}");
    let col = rand_tensor(&[5, 1], &mut rng, -1.0, 1.0);
    let err = fd_check(&col, move |tape, p| {
        let y = tape.broadcast_cols(p, 6)?;
        mix(tape, y, 97)
    });
    assert!(err < TOL, "broadcast_cols err {err}");
}

// ── Closed-form anchors ─────────────────────────────────────────────────

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn gelu_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    let y = tape.gelu(x).unwrap();
    assert_eq!(tape.value(y).item(), 0.0);
}

#[test]
fn identity_conv_kernel_preserves_image() {
    let mut tape = Tape::new();
    let img = Tensor::from_fn(&[1, 4, 5], |i| i as f64 * 0.25 - 2.0);
    let x = tape.constant(img.clone());
    let w = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), img.data());
}

#[test]
fn backward_of_sum_of_squares_is_two_w() {
    let mut tape = Tape::new();
    let mut w = Tensor::new(vec![1], vec![3.0]).unwrap();
    w.requires_grad = true;
    let p = tape.leaf(w);
    let sq = tape.mul(p, p).unwrap();
    let loss = tape.sum(sq, None).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[6.0]);
}

#[test]
fn backward_of_mean_tanh_at_zero_is_inverse_len() {
    let mut tape = Tape::new();
    let mut w = Tensor::zeros(&[4]);
    w.requires_grad = true;
    let p = tape.leaf(w);
    let t = tape.tanh(p).unwrap();
    let loss = tape.mean(t, None).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[0.25, 0.25, 0.25, 0.25]);
}

#[test]
fn quadratic_loss_check_is_exact_to_roundoff() {
    let mut rng = Rng::new(10);
    let w = rand_tensor(&[6], &mut rng, -1.0, 1.0);
    let err = fd_check(&w, |tape, p| {
        let sq = tape.mul(p, p)?;
        tape.sum(sq, None)
    });
    assert!(err < 1e-7, "quadratic err {err}");
}

#[test]
fn abs_subgradient_is_zero_at_zero() {
    let mut tape = Tape::new();
    let mut w = Tensor::new(vec![3], vec![-2.0, 0.0, 1.5]).unwrap();
    w.requires_grad = true;
    let p = tape.leaf(w);
    let a = tape.abs(p).unwrap();
    let loss = tape.sum(a, None).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[-1.0, 0.0, 1.0]);
}

// ── Engine invariants ───────────────────────────────────────────────────

#[test]
fn replaying_a_graph_is_bit_identical() {
    let run = || -> Vec<u64> {
        let mut rng = Rng::new(77);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[4, 4], &mut rng, -1.0, 1.0));
        let w = tape.constant(rand_tensor(&[4, 4], &mut rng, -1.0, 1.0));
        let y = tape.matmul(x, w).unwrap();
        let g = tape.gelu(y).unwrap();
        let s = tape.softmax(g, 1).unwrap();
        tape.value(s).data().iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let mut x = Tensor::zeros(&[3]);
    x.requires_grad = true;
    let p = tape.leaf(x);
    assert_eq!(tape.backward(p), Err(TensorError::NonScalarLoss));
}

#[test]
fn shape_mismatch_names_the_offending_primitive() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    match err {
        TensorError::ShapeMismatch { op, detail } => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"));
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn non_finite_input_is_rejected() {
    let mut tape = Tape::new();
    let mut bad = Tensor::zeros(&[2]);
    bad.data_mut()[0] = f64::NAN;
    let a = tape.constant(bad);
    assert_eq!(
        tape.gelu(a),
        Err(TensorError::NonFiniteInput { op: "gelu" })
    );
}

#[test]
fn spread_indices_covers_bounds() {
    assert_eq!(spread_indices(3, 10), vec![0, 1, 2]);
    let idx = spread_indices(1000, 10);
    assert_eq!(idx.len(), 10);
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    assert!(*idx.last().unwrap() < 1000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_stochastic_and_positive(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..7) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.uniform(-30.0, 30.0));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, 1).unwrap();
        let out = tape.value(s);
        for r in 0..rows {
            let row_sum: f64 = (0..cols).map(|c| out.at2(r, c)).sum();
            prop_assert!((row_sum - 1.0).abs() < 1e-9);
            for c in 0..cols {
                prop_assert!(out.at2(r, c) > 0.0);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_before_affine(seed in 0u64..1000, rows in 1usize..5) {
        let cols = 8usize;
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.uniform(-4.0, 9.0));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::full(&[cols], 1.0));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let y = tape.layer_norm(v, g, b, 0.0).unwrap();
        let out = tape.value(y);
        for r in 0..rows {
            let mean: f64 = (0..cols).map(|c| out.at2(r, c)).sum::<f64>() / cols as f64;
            let var: f64 =
                (0..cols).map(|c| (out.at2(r, c) - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_with_zero_bias_is_linear(seed in 0u64..1000, scale in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[2, 4, 4], |_| rng.uniform(-1.0, 1.0));
        let w = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.uniform(-1.0, 1.0));
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::zeros(&[3]));
        let wv = tape.constant(w);
        let x1 = tape.constant(x.clone());
        let y1 = tape.conv2d(x1, wv, b).unwrap();
        let scaled_in = tape.constant(x.map(|v| v * scale));
        let y2 = tape.conv2d(scaled_in, wv, b).unwrap();
        let y1_scaled = tape.scale(y1, scale).unwrap();
        let (a, bb) = (tape.value(y1_scaled), tape.value(y2));
        for (p, q) in a.data().iter().zip(bb.data()) {
            let denom = p.abs().max(q.abs()).max(1.0);
            prop_assert!((p - q).abs() / denom < 1e-10);
        }
    }
}
