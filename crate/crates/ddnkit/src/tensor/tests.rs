use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Central finite differences, h = 1e-5, against the tape's analytic grads.
/// `build` must be a pure function of the leaf values it is handed.
pub(crate) fn grad_check<F>(inputs: &[TensorData], build: F, tol: f64)
where
    F: Fn(&mut Tape, &[Tensor]) -> Tensor,
{
    let run = |vals: &[TensorData]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Tensor> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &leaves);
        tape.scalar_value(loss)
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &leaves);
    tape.backward(loss).unwrap();

    let h = 1e-5;
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(leaves[ti]).expect("input unreachable from loss");
        for e in 0..input.data.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data[e] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data[e] -= h;
            let fd = (run(&plus) - run(&minus)) / (2.0 * h);
            let denom = analytic[e].abs().max(fd.abs());
            if denom < 1e-8 {
                continue;
            }
            let rel = (analytic[e] - fd).abs() / denom;
            assert!(
                rel <= tol,
                "tensor {ti} elem {e}: analytic {} vs fd {} (rel {rel:.3e})",
                analytic[e],
                fd
            );
        }
    }
}

/// Random values kept away from relu/pool decision boundaries.
pub(crate) fn randn_off_kinks(shape: Shape, rng: &mut ChaCha8Rng) -> TensorData {
    let mut t = TensorData::randn(shape, rng);
    for v in t.data.iter_mut() {
        if v.abs() < 0.05 {
            *v += if *v >= 0.0 { 0.1 } else { -0.1 };
        }
    }
    t
}

fn scalar_probe_loss(tape: &mut Tape, out: Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    // Random positive projection keeps the check sensitive to every element.
    let w: Vec<f64> = (0..out.shape.numel()).map(|_| 0.5 + rng.gen::<f64>()).collect();
    tape.weighted_sum(out, Arc::new(w)).unwrap()
}

#[test]
fn conv_scalar_scaling() {
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::filled(Shape::new(1, 1, 3, 3), 1.0));
    let w = tape.leaf(TensorData::filled(Shape::new(1, 1, 1, 1), 2.0));
    let b = tape.leaf(TensorData::zeros(Shape::new(1, 1, 1, 1)));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(y.shape, Shape::new(1, 1, 3, 3));
    assert!(tape.value(y).iter().all(|&v| v == 2.0));
}

#[test]
fn conv_impulse_response_is_kernel_support() {
    let mut tape = Tape::new();
    let mut x = TensorData::zeros(Shape::new(1, 1, 7, 7));
    x.set(0, 0, 3, 3, 1.0);
    let x = tape.leaf(x);
    let w = tape.leaf(TensorData::filled(Shape::new(1, 1, 3, 3), 1.0));
    let b = tape.leaf(TensorData::zeros(Shape::new(1, 1, 1, 1)));
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    let v = tape.to_data(y);
    for yy in 0..7 {
        for xx in 0..7 {
            let expect = if (2..=4).contains(&yy) && (2..=4).contains(&xx) {
                1.0
            } else {
                0.0
            };
            assert_eq!(v.get(0, 0, yy, xx), expect, "at ({yy},{xx})");
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = TensorData::randn(Shape::new(2, 3, 8, 8), &mut rng);
    let w = TensorData::randn(Shape::new(4, 3, 3, 3), &mut rng);
    let b = TensorData::randn(Shape::new(1, 4, 1, 1), &mut rng);
    let mut lrng = ChaCha8Rng::seed_from_u64(8);
    let wproj: Vec<f64> = (0..2 * 4 * 8 * 8).map(|_| 0.5 + lrng.gen::<f64>()).collect();
    let wproj = Arc::new(wproj);
    grad_check(
        &[x, w, b],
        move |tape, leaves| {
            let y = tape.conv2d(leaves[0], leaves[1], leaves[2], 1, 1).unwrap();
            tape.weighted_sum(y, wproj.clone()).unwrap()
        },
        1e-4,
    );
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::zeros(Shape::new(1, 2, 4, 4)));
    let w = tape.leaf(TensorData::zeros(Shape::new(1, 3, 3, 3)));
    let b = tape.leaf(TensorData::zeros(Shape::new(1, 1, 1, 1)));
    match tape.conv2d(x, w, b, 1, 1) {
        Err(Error::ShapeMismatch { axis, expected, got, .. }) => {
            assert_eq!(axis, "input channels");
            assert_eq!((expected, got), (3, 2));
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn max_pool_basics_and_tie_rule() {
    let mut tape = Tape::new();
    let x = tape.leaf(
        TensorData::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    );
    let y = tape.max_pool2d(x).unwrap();
    assert_eq!(tape.value(y), &[4.0]);

    // Constant input: tie goes to window position (0,0).
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::filled(Shape::new(1, 1, 4, 4), 3.5));
    let y = tape.max_pool2d(x).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 3.5));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    for yy in 0..4 {
        for xx in 0..4 {
            let expect = if yy % 2 == 0 && xx % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(g[yy * 4 + xx], expect);
        }
    }

    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::zeros(Shape::new(1, 1, 3, 4)));
    assert!(tape.max_pool2d(x).is_err());
}

#[test]
fn max_pool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn_off_kinks(Shape::new(1, 2, 8, 8), &mut rng);
    let mut lrng = ChaCha8Rng::seed_from_u64(12);
    let wproj: Vec<f64> = (0..2 * 4 * 4).map(|_| 0.5 + lrng.gen::<f64>()).collect();
    let wproj = Arc::new(wproj);
    grad_check(
        &[x],
        move |tape, leaves| {
            let y = tape.max_pool2d(leaves[0]).unwrap();
            tape.weighted_sum(y, wproj.clone()).unwrap()
        },
        1e-4,
    );
}

#[test]
fn upsample_constant_and_mass_conservation() {
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::filled(Shape::new(1, 2, 4, 4), 0.7));
    let y = tape.upsample_bilinear2x(x);
    assert_eq!(y.shape, Shape::new(1, 2, 8, 8));
    assert!(tape.value(y).iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let grad_in: f64 = tape.grad(x).unwrap().iter().sum();
    let grad_out = y.shape.numel() as f64; // upstream all-ones
    assert!((grad_in - grad_out).abs() < 1e-12 * grad_out);
}

#[test]
fn upsample_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = TensorData::randn(Shape::new(1, 1, 4, 4), &mut rng);
    let mut lrng = ChaCha8Rng::seed_from_u64(14);
    let wproj: Vec<f64> = (0..64).map(|_| 0.5 + lrng.gen::<f64>()).collect();
    let wproj = Arc::new(wproj);
    grad_check(
        &[x],
        move |tape, leaves| {
            let y = tape.upsample_bilinear2x(leaves[0]);
            tape.weighted_sum(y, wproj.clone()).unwrap()
        },
        1e-4,
    );
}

#[test]
fn batch_norm_normalizes_and_respects_gamma() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xs = Shape::new(2, 3, 4, 4);
    let x = TensorData::randn(xs, &mut rng);
    let mut tape = Tape::new();
    let xt = tape.leaf(x.clone());
    let gamma = tape.leaf(TensorData::filled(Shape::new(1, 3, 1, 1), 1.0));
    let beta = tape.leaf(TensorData::zeros(Shape::new(1, 3, 1, 1)));
    let mut stats = RunningStats::identity(3);
    let y = tape.batch_norm2d(xt, gamma, beta, &mut stats, Mode::Train).unwrap();
    let out = tape.to_data(y);
    let plane = 16;
    for ch in 0..3 {
        let mut vals = Vec::new();
        for n in 0..2 {
            vals.extend_from_slice(&out.data[(n * 3 + ch) * plane..(n * 3 + ch + 1) * plane]);
        }
        let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-12, "channel {ch} mean {m}");
        assert!((v - 1.0).abs() < 1e-3, "channel {ch} var {v}"); // epsilon effect
    }

    // gamma = 0 makes the output a beta broadcast.
    let mut tape = Tape::new();
    let xt = tape.leaf(x);
    let gamma = tape.leaf(TensorData::zeros(Shape::new(1, 3, 1, 1)));
    let beta = tape.leaf(TensorData::from_vec(
        Shape::new(1, 3, 1, 1),
        vec![0.3, -1.0, 2.0],
    )
    .unwrap());
    let mut stats = RunningStats::identity(3);
    let y = tape.batch_norm2d(xt, gamma, beta, &mut stats, Mode::Train).unwrap();
    let out = tape.to_data(y);
    for n in 0..2 {
        for (ch, expect) in [0.3, -1.0, 2.0].iter().enumerate() {
            for p in 0..plane {
                assert_eq!(out.data[(n * 3 + ch) * plane + p], *expect);
            }
        }
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = TensorData::randn(Shape::new(2, 2, 3, 3), &mut rng);
    let gamma = TensorData::from_vec(Shape::new(1, 2, 1, 1), vec![1.3, 0.7]).unwrap();
    let beta = TensorData::from_vec(Shape::new(1, 2, 1, 1), vec![0.1, -0.2]).unwrap();
    let mut lrng = ChaCha8Rng::seed_from_u64(20);
    let wproj: Vec<f64> = (0..2 * 2 * 9).map(|_| 0.5 + lrng.gen::<f64>()).collect();
    let wproj = Arc::new(wproj);
    for mode in [Mode::Train, Mode::Eval] {
        let wp = wproj.clone();
        grad_check(
            &[x.clone(), gamma.clone(), beta.clone()],
            move |tape, leaves| {
                let mut stats = RunningStats::identity(2);
                stats.mean = vec![0.2, -0.1];
                stats.var = vec![1.5, 0.8];
                let y = tape
                    .batch_norm2d(leaves[0], leaves[1], leaves[2], &mut stats, mode)
                    .unwrap();
                tape.weighted_sum(y, wp.clone()).unwrap()
            },
            1e-4,
        );
    }
}

#[test]
fn relu_and_dropout_basics() {
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::from_vec(Shape::new(1, 1, 1, 2), vec![-3.0, 5.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y), &[0.0, 5.0]);

    // rate 0 is the identity in both modes
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [Mode::Train, Mode::Eval] {
        let mut tape = Tape::new();
        let x = tape.leaf(TensorData::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.dropout(x, 0.0, mode, &mut rng).unwrap();
        assert_eq!(tape.value(y), &[1.0, -2.0, 0.5]);
    }
}

#[test]
fn dropout_preserves_mean_at_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 1_000_000;
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::filled(Shape::new(1, 1, 1000, 1000), 1.0));
    let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
    let mean = tape.value(y).iter().sum::<f64>() / n as f64;
    assert!((0.99..=1.01).contains(&mean), "mean {mean}");
}

#[test]
fn backward_sum_gives_ones_and_scale_zero_gives_zeros() {
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::filled(Shape::new(1, 2, 3, 3), 4.2));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::filled(Shape::new(1, 1, 2, 2), 3.0));
    let z = tape.affine(x, 0.0, 0.0);
    let s = tape.sum(z);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::zeros(Shape::new(1, 1, 2, 2)));
    assert!(tape.backward(x).is_err());
}

#[test]
fn composite_chain_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = randn_off_kinks(Shape::new(1, 2, 8, 8), &mut rng);
    let w = TensorData::randn(Shape::new(3, 2, 3, 3), &mut rng);
    let b = TensorData::randn(Shape::new(1, 3, 1, 1), &mut rng);
    let gamma = TensorData::from_vec(Shape::new(1, 3, 1, 1), vec![1.1, 0.9, 1.0]).unwrap();
    let beta = TensorData::from_vec(Shape::new(1, 3, 1, 1), vec![0.0, 0.1, -0.1]).unwrap();
    let mut lrng = ChaCha8Rng::seed_from_u64(24);
    let wproj: Vec<f64> = (0..3 * 4 * 4).map(|_| 0.5 + lrng.gen::<f64>()).collect();
    let wproj = Arc::new(wproj);
    grad_check(
        &[x, w, b, gamma, beta],
        move |tape, leaves| {
            let c = tape.conv2d(leaves[0], leaves[1], leaves[2], 1, 1).unwrap();
            let mut stats = RunningStats::identity(3);
            let bn = tape
                .batch_norm2d(c, leaves[3], leaves[4], &mut stats, Mode::Train)
                .unwrap();
            let r = tape.relu(bn);
            let p = tape.max_pool2d(r).unwrap();
            tape.weighted_sum(p, wproj.clone()).unwrap()
        },
        1e-4,
    );
}

#[test]
fn seed_gradient_identity_conv_is_one_hot() {
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::filled(Shape::new(1, 1, 5, 5), 0.3));
    let w = tape.leaf(TensorData::filled(Shape::new(1, 1, 1, 1), 1.0));
    let b = tape.leaf(TensorData::zeros(Shape::new(1, 1, 1, 1)));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    tape.seed_gradient_at(y, 0, 2, 3).unwrap();
    let g = tape.grad(x).unwrap();
    for yy in 0..5 {
        for xx in 0..5 {
            let expect = if (yy, xx) == (2, 3) { 1.0 } else { 0.0 };
            assert_eq!(g[yy * 5 + xx], expect);
        }
    }
}

#[test]
fn seed_gradient_support_grows_with_stacked_convs() {
    // One 3x3 all-ones conv: 3x3 window. Two stacked: 5x5 window.
    for (stacks, side) in [(1usize, 3usize), (2, 5)] {
        let mut tape = Tape::new();
        let x = tape.leaf(TensorData::filled(Shape::new(1, 1, 9, 9), 0.5));
        let w = tape.leaf(TensorData::filled(Shape::new(1, 1, 3, 3), 1.0));
        let b = tape.leaf(TensorData::zeros(Shape::new(1, 1, 1, 1)));
        let mut y = x;
        for _ in 0..stacks {
            y = tape.conv2d(y, w, b, 1, 1).unwrap();
        }
        tape.seed_gradient_at(y, 0, 4, 4).unwrap();
        let g = tape.grad(x).unwrap();
        let mut support = 0;
        for yy in 0..9 {
            for xx in 0..9 {
                let inside = (4 - yy as i64).abs() <= side as i64 / 2
                    && (4 - xx as i64).abs() <= side as i64 / 2;
                if g[yy * 9 + xx] != 0.0 {
                    support += 1;
                    assert!(inside, "gradient outside {side}x{side} window at ({yy},{xx})");
                }
            }
        }
        assert_eq!(support, side * side);
    }
}

#[test]
fn seed_gradient_rejects_out_of_range() {
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::zeros(Shape::new(1, 1, 4, 4)));
    assert!(tape.seed_gradient_at(x, 1, 0, 0).is_err());
    assert!(tape.seed_gradient_at(x, 0, 4, 0).is_err());
}

#[test]
fn linear_ops_are_homogeneous() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a = 2.75;
    let x = TensorData::randn(Shape::new(1, 2, 4, 4), &mut rng);
    let w = TensorData::randn(Shape::new(2, 2, 3, 3), &mut rng);
    let scaled = TensorData::from_vec(x.shape, x.data.iter().map(|v| v * a).collect()).unwrap();

    let run = |input: &TensorData| -> Vec<f64> {
        let mut tape = Tape::new();
        let xt = tape.leaf(input.clone());
        let wt = tape.leaf(w.clone());
        let bt = tape.leaf(TensorData::zeros(Shape::new(1, 2, 1, 1)));
        let c = tape.conv2d(xt, wt, bt, 1, 1).unwrap();
        let u = tape.upsample_bilinear2x(c);
        let s = tape.add(u, u).unwrap();
        let cc = tape.concat_channels(&[s, u]).unwrap();
        tape.value(cc).to_vec()
    };
    let base = run(&x);
    let scaled_out = run(&scaled);
    for (s, b) in scaled_out.iter().zip(&base) {
        let expect = a * b;
        let denom = expect.abs().max(1e-30);
        assert!((s - expect).abs() / denom < 1e-12);
    }
}

#[test]
fn softmax_channels_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let x = TensorData::randn(Shape::new(2, 5, 3, 3), &mut rng);
    let mut tape = Tape::new();
    let xt = tape.leaf(x);
    let y = tape.softmax_channels(xt);
    let out = tape.to_data(y);
    for n in 0..2 {
        for p in 0..9 {
            let s: f64 = (0..5).map(|c| out.data[(n * 5 + c) * 9 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    let mut lrng = ChaCha8Rng::seed_from_u64(38);
    let x = TensorData::randn(Shape::new(1, 3, 2, 2), &mut lrng);
    let wproj: Vec<f64> = (0..12).map(|_| 0.5 + lrng.gen::<f64>()).collect();
    let wproj = Arc::new(wproj);
    grad_check(
        &[x],
        move |tape, leaves| {
            let y = tape.softmax_channels(leaves[0]);
            tape.weighted_sum(y, wproj.clone()).unwrap()
        },
        1e-4,
    );
}

#[test]
fn sigmoid_and_scalar_helpers_differentiate() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = TensorData::randn(Shape::new(1, 1, 3, 3), &mut rng);
    let mut lrng = ChaCha8Rng::seed_from_u64(43);
    let wproj: Vec<f64> = (0..9).map(|_| 0.5 + lrng.gen::<f64>()).collect();
    let wa = Arc::new(wproj.clone());
    let wb = Arc::new(wproj);
    grad_check(
        &[x],
        move |tape, leaves| {
            let s = tape.sigmoid(leaves[0]);
            let l = tape.ln_clamped(s, 1e-12);
            let q = tape.square_sum(l);
            let ws = tape.weighted_sum(s, wa.clone()).unwrap();
            let wl = tape.weighted_sum(l, wb.clone()).unwrap();
            let r = tape.div(ws, wl).unwrap();
            let t = tape.add(q, r).unwrap();
            tape.affine(t, 1.5, 0.25)
        },
        1e-4,
    );
}

#[test]
fn identical_seeds_are_bit_identical() {
    let run = |seed: u64| -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = TensorData::randn(Shape::new(2, 3, 8, 8), &mut rng);
        let w = TensorData::randn(Shape::new(4, 3, 3, 3), &mut rng);
        let b = TensorData::randn(Shape::new(1, 4, 1, 1), &mut rng);
        let mut tape = Tape::new();
        let (xt, wt, bt) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
        let c = tape.conv2d(xt, wt, bt, 1, 1).unwrap();
        let r = tape.relu(c);
        let d = tape.dropout(r, 0.5, Mode::Train, &mut rng).unwrap();
        let s = tape.sum(d);
        tape.backward(s).unwrap();
        (tape.value(c).to_vec(), tape.grad(wt).unwrap().to_vec())
    };
    let (v1, g1) = run(99);
    let (v2, g2) = run(99);
    assert_eq!(v1, v2);
    assert_eq!(g1, g2);
}

#[test]
fn dropout_gradients_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = TensorData::randn(Shape::new(1, 2, 4, 4), &mut rng);
    let mut lrng = ChaCha8Rng::seed_from_u64(52);
    let wproj: Vec<f64> = (0..32).map(|_| 0.5 + lrng.gen::<f64>()).collect();
    let wproj = Arc::new(wproj);
    grad_check(
        &[x],
        move |tape, leaves| {
            // Same rng seed per evaluation: the mask is a fixed linear map.
            let mut drng = ChaCha8Rng::seed_from_u64(500);
            let d = tape.dropout(leaves[0], 0.5, Mode::Train, &mut drng).unwrap();
            tape.weighted_sum(d, wproj.clone()).unwrap()
        },
        1e-4,
    );
}

#[test]
fn unreachable_nodes_keep_no_grad() {
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::filled(Shape::new(1, 1, 2, 2), 1.0));
    let unrelated = tape.leaf(TensorData::filled(Shape::new(1, 1, 2, 2), 2.0));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(unrelated).is_none());
}

#[test]
fn scalar_probe_loss_is_deterministic() {
    let mut tape = Tape::new();
    let x = tape.leaf(TensorData::filled(Shape::new(1, 1, 2, 2), 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l1 = scalar_probe_loss(&mut tape, x, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l2 = scalar_probe_loss(&mut tape, x, &mut rng);
    assert_eq!(tape.scalar_value(l1), tape.scalar_value(l2));
}
