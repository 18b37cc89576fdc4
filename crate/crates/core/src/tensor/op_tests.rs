use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn grid3() -> Tensor {
    t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.])
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `±[margin, 1]`, kept away from zero so ReLU kinks stay
/// out of finite-difference reach.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Direct nested-loop cross-correlation.
fn naive_conv(x: &Tensor, k: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, w] = x.dims4().unwrap();
    let [cout, _, kh, kw] = k.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    for s in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[((s * cin + c) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * cin + c) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out.data_mut()[((s * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

// conv2d

#[test]
fn conv_zero_input_gives_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 5, 5]));
    let k = tape.constant(Tensor::randn(&[4, 3, 3, 3], 0.0, 1.0, &mut rng(1)));
    let b = tape.constant(t(&[4], &[0.5, -1.0, 2.0, 0.0]));
    let y = tape.conv2d(x, k, Some(b), 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[2, 4, 5, 5]);
    for (i, v) in out.data().iter().enumerate() {
        let ch = (i / 25) % 4;
        assert_eq!(*v, [0.5, -1.0, 2.0, 0.0][ch]);
    }
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(grid3());
    let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y), &grid3());
}

#[test]
fn conv_sliding_window_sum() {
    let x = grid3();
    let k = Tensor::ones(&[1, 1, 2, 2]);
    let expected = naive_conv(&x, &k, &[0.0], 1, 0);
    assert_eq!(expected.data(), &[12., 16., 24., 28.]);
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x), tape.constant(k));
    let y = tape.conv2d(xv, kv, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[12., 16., 24., 28.]);
}

#[test]
fn conv_errors_name_the_dimension() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = tape.conv2d(x, k, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("Cin"), "{err}");
    let empty = tape.constant(Tensor::zeros(&[0, 2, 3, 3]));
    let err = tape.conv2d(x, empty, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("empty"), "{err}");
    let big = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
    assert!(matches!(tape.conv2d(x, big, None, 1, 0), Err(Error::InvalidArgument(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loops(
        seed in 0u64..1000,
        cin in 1usize..3, cout in 1usize..3,
        h in 3usize..9, w in 3usize..9,
        kh in 1usize..4, kw in 1usize..4,
        stride in 1usize..3, pad in 0usize..2,
    ) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[2, cin, h, w], 0.0, 1.0, &mut r);
        let k = Tensor::randn(&[cout, cin, kh, kw], 0.0, 1.0, &mut r);
        let b = Tensor::randn(&[cout], 0.0, 1.0, &mut r);
        let expected = naive_conv(&x, &k, b.data(), stride, pad);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x), tape.constant(k), tape.constant(b));
        let y = tape.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        prop_assert_eq!(tape.shape(y), expected.shape());
        prop_assert_eq!(tape.shape(y)[2], (h + 2 * pad - kh) / stride + 1);
        prop_assert_eq!(tape.shape(y)[3], (w + 2 * pad - kw) / stride + 1);
        for (a, e) in tape.value(y).data().iter().zip(expected.data()) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_shapes_follow_floor_formula(
        h in 2usize..12, w in 2usize..12, k in 1usize..4, stride in 1usize..4, pad in 0usize..2,
    ) {
        prop_assume!(pad < k && k <= h + 2 * pad && k <= w + 2 * pad);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, h, w]));
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let y = tape.pool2d(x, kind, k, k, stride, pad).unwrap();
            prop_assert_eq!(
                tape.shape(y),
                &[1, 2, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]
            );
        }
    }

    #[test]
    fn sigmoid_is_bounded_and_monotone(beta in 0.01f64..1.0, a in -30.0f64..30.0, d in 0.0f64..5.0) {
        // strictness holds while |beta·x| < 36; beyond that f64 rounds to 0 or 1
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[a, a + d]));
        let y = tape.sigmoid_scaled(x, beta).unwrap();
        let v = tape.value(y).data();
        prop_assert!(v[0] > 0.0 && v[0] < 1.0 && v[1] > 0.0 && v[1] < 1.0);
        prop_assert!(v[1] >= v[0]);
    }

    #[test]
    fn batch_norm_standardizes(seed in 0u64..500, c in 1usize..4) {
        let x = Tensor::randn(&[3, c, 4, 5], 2.0, 3.0, &mut rng(seed));
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[c]));
        let b = tape.constant(Tensor::zeros(&[c]));
        let eps = 1e-5;
        let y = tape.batch_norm2d(xv, g, b, eps, BatchNormMode::Train).unwrap();
        let (_, var) = tape.batch_stats(y).unwrap();
        let var = var.to_vec();
        let out = tape.value(y).data();
        for ch in 0..c {
            let vals: Vec<f64> = (0..3)
                .flat_map(|s| out[(s * c + ch) * 20..(s * c + ch + 1) * 20].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            // exactly var/(var+eps) in exact arithmetic
            prop_assert!((v - var[ch] / (var[ch] + eps)).abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < eps / var[ch] + 1e-9);
        }
    }
}

// pool2d

#[test]
fn pool_constant_field() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 2, 4, 4], 3.25));
    for kind in [PoolKind::Max, PoolKind::Avg] {
        let y = tape.pool2d(x, kind, 2, 2, 2, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 3.25));
    }
}

#[test]
fn max_pool_window_enumeration() {
    let x = grid3();
    // oracle: enumerate each 2x2 window
    let mut expected = vec![];
    for oy in 0..2 {
        for ox in 0..2 {
            let mut m = f64::MIN;
            for i in 0..2 {
                for j in 0..2 {
                    m = m.max(x.data()[(oy + i) * 3 + ox + j]);
                }
            }
            expected.push(m);
        }
    }
    assert_eq!(expected, vec![5., 6., 8., 9.]);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape.pool2d(xv, PoolKind::Max, 2, 2, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), expected.as_slice());
}

#[test]
fn avg_pool_mean() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let y = tape.pool2d(x, PoolKind::Avg, 2, 2, 2, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[(1. + 2. + 3. + 4.) / 4.]);
}

#[test]
fn pool_window_too_large() {
    let mut tape = Tape::new();
    let x = tape.constant(grid3());
    assert!(matches!(
        tape.pool2d(x, PoolKind::Max, 4, 4, 1, 0),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn max_pool_ties_route_to_first_argmax() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[1, 1, 2, 2], &[7., 7., 7., 7.]));
    let y = tape.pool2d(x, PoolKind::Max, 2, 2, 1, 0).unwrap();
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1., 0., 0., 0.]);
}

#[test]
fn avg_pool_distributes_uniformly() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[1, 1, 2, 2], &[1., 5., -2., 0.]));
    let y = tape.pool2d(x, PoolKind::Avg, 2, 2, 1, 0).unwrap();
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
}

// relu

#[test]
fn relu_values_and_subgradient() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[3], &[-1., 0., 2.]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0., 0., 1.]);
}

#[test]
fn relu_identity_on_non_negative() {
    let x = Tensor::uniform(&[10], 0.0, 5.0, &mut rng(3));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.relu(xv);
    assert_eq!(tape.value(y), &x);
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let x = away_from_zero(&[20], 1e-3, &mut rng(4));
    let report = grad_check(
        |tape, x| {
            let y = tape.relu(x);
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(report.excluded.is_empty());
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

// sigmoid

#[test]
fn sigmoid_reference_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 1.0, -3.0]));
    for beta in [0.0, 0.3, 1.0, 7.0] {
        let y = tape.sigmoid_scaled(x, beta).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
    }
    let y = tape.sigmoid_scaled(x, 0.0).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.5));
    let y = tape.sigmoid_scaled(x, 1.0).unwrap();
    let direct = 1.0 / (1.0 + (-1f64).exp());
    assert!((tape.value(y).data()[1] - direct).abs() < 1e-15);
    assert!((direct - 0.731059).abs() < 1e-6);
    assert!(tape.sigmoid_scaled(x, f64::NAN).is_err());
}

#[test]
fn sigmoid_saturates_without_nan() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1e4, 1e4]));
    let y = tape.sigmoid_scaled(x, 1.0).unwrap();
    assert!(tape.value(y).is_finite());
}

// batch_norm2d

#[test]
fn batch_norm_constant_channel_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 1, 3, 3], 4.0));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.batch_norm2d(x, g, b, 1e-5, BatchNormMode::Train).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn batch_norm_two_values_hand_computed() {
    // mean 1, biased variance 1: (x - 1) / sqrt(1 + eps)
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 1, 2], &[0.0, 2.0]));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.batch_norm2d(x, g, b, 1e-12, BatchNormMode::Train).unwrap();
    assert_close(tape.value(y).data(), &[-1.0, 1.0], 1e-9);
}

#[test]
fn batch_norm_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let err = tape.batch_norm2d(x, g, b, 1e-5, BatchNormMode::Train).unwrap_err();
    assert!(err.to_string().contains("gamma"), "{err}");
}

#[test]
fn batch_norm_eval_uses_running_stats_and_ema_updates() {
    let mut stats = RunningStats::new(1);
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 1, 4], &[1., 2., 3., 4.]));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.batch_norm2d(x, g, b, 1e-5, BatchNormMode::Train).unwrap();
    let (m, v) = tape.batch_stats(y).unwrap();
    assert_eq!((m[0], v[0]), (2.5, 1.25));
    stats.update(m, v, 4);
    assert!((stats.mean[0] - 0.25).abs() < 1e-15);
    // unbiased batch variance 5/3
    assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);

    let frozen = RunningStats {
        mean: vec![1.0],
        var: vec![4.0 - 1e-5],
    };
    let y = tape
        .batch_norm2d(x, g, b, 1e-5, BatchNormMode::Eval { mean: &frozen.mean, var: &frozen.var })
        .unwrap();
    assert_close(tape.value(y).data(), &[0.0, 0.5, 1.0, 1.5], 1e-12);
    assert!(tape.batch_stats(y).is_none());
}

// upsample_nearest2

#[test]
fn upsample_single_pixel_and_grid() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1, 1, 1, 1], &[2.5]));
    let y = tape.upsample_nearest2(a).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5; 4]);

    let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let y = tape.upsample_nearest2(x).unwrap();
    #[rustfmt::skip]
    let expected = [
        1., 1., 2., 2.,
        1., 1., 2., 2.,
        3., 3., 4., 4.,
        3., 3., 4., 4.,
    ];
    assert_eq!(tape.value(y).data(), &expected);

    let many = tape.constant(Tensor::zeros(&[2, 7, 3, 5]));
    let y = tape.upsample_nearest2(many).unwrap();
    assert_eq!(tape.shape(y), &[2, 7, 6, 10]);
}

#[test]
fn upsample_backward_sums_blocks() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[1, 1, 1, 2], &[1., 2.]));
    let y = tape.upsample_nearest2(x).unwrap();
    let w = tape.constant(t(&[1, 1, 2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]));
    let p = tape.mul(y, w).unwrap();
    let l = tape.sum(p);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1. + 2. + 5. + 6., 3. + 4. + 7. + 8.]);
}

// add / mul

#[test]
fn add_mul_identities() {
    let x = Tensor::randn(&[2, 3], 0.0, 1.0, &mut rng(5));
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let zeros = tape.constant(Tensor::zeros(&[2, 3]));
    let ones = tape.constant(Tensor::ones(&[2, 3]));
    let s = tape.add(xv, zeros).unwrap();
    assert_eq!(tape.value(s), &x);
    let p = tape.mul(xv, ones).unwrap();
    assert_eq!(tape.value(p), &x);
    let z = tape.mul(xv, zeros).unwrap();
    assert!(tape.value(z).data().iter().all(|v| *v == 0.0));
    let l = tape.sum(z);
    tape.backward(l).unwrap();
    assert!(tape.grad(xv).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn add_mul_reject_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, b), Err(Error::InvalidArgument(_))));
    assert!(matches!(tape.mul(a, b), Err(Error::InvalidArgument(_))));
}

#[test]
fn mul_backward_matches_finite_differences() {
    let mut r = rng(6);
    let a = Tensor::randn(&[3, 4], 0.0, 1.0, &mut r);
    let b = Tensor::randn(&[3, 4], 0.0, 1.0, &mut r);
    let w = Tensor::randn(&[3, 4], 0.0, 1.0, &mut r);
    let report = GradChecker::new(1e-5)
        .run(
            |tape, v| {
                let p = tape.mul(v[0], v[1])?;
                let wv = tape.constant(w.clone());
                let q = tape.mul(p, wv)?;
                Ok(tape.sum(q))
            },
            &[a.clone(), b.clone()],
        )
        .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");

    // the product rule: dL/da = b ⊙ w
    let mut tape = Tape::new();
    let (av, bv, wv) = (tape.variable(a), tape.constant(b.clone()), tape.constant(w.clone()));
    let p = tape.mul(av, bv).unwrap();
    let q = tape.mul(p, wv).unwrap();
    let l = tape.sum(q);
    tape.backward(l).unwrap();
    let expected: Vec<f64> = b.data().iter().zip(w.data()).map(|(x, y)| x * y).collect();
    assert_eq!(tape.grad(av).unwrap(), expected.as_slice());
}

// fully_connected

#[test]
fn fully_connected_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1., 2.]));
    let w = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b = tape.constant(t(&[2], &[3., 4.]));
    let y = tape.fully_connected(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[4., 6.]);

    let zero_b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.fully_connected(x, w, zero_b).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2.]);

    let zx = tape.constant(Tensor::zeros(&[3, 2]));
    let y = tape.fully_connected(zx, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[3., 4., 3., 4., 3., 4.]);

    let bad = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.fully_connected(x, bad, b), Err(Error::InvalidArgument(_))));
}

// softmax_cross_entropy

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::full(&[2, 5], 0.7));
    let l = tape.softmax_cross_entropy(uniform, &[0, 3]).unwrap();
    assert!((tape.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-14);

    let confident = tape.constant(t(&[1, 3], &[800.0, 0.0, 0.0]));
    let l = tape.softmax_cross_entropy(confident, &[0]).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-300);

    let z = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
    let direct = (1.0 + std::f64::consts::E).ln();
    assert!((tape.value(l).item().unwrap() - direct).abs() < 1e-14);
    assert!((direct - 1.313262).abs() < 1e-6);

    assert!(matches!(
        tape.softmax_cross_entropy(z, &[2]),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut tape = Tape::new();
    let z = tape.variable(t(&[2, 2], &[1.0, 2.0, 0.0, 0.0]));
    let l = tape.softmax_cross_entropy(z, &[0, 1]).unwrap();
    tape.backward(l).unwrap();
    let p = 1.0 / (1.0 + std::f64::consts::E);
    assert_close(
        tape.grad(z).unwrap(),
        &[(p - 1.0) / 2.0, (1.0 - p) / 2.0, 0.25, -0.25],
        1e-15,
    );
}

// backward

#[test]
fn backward_sum_and_independent_inputs() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::randn(&[4], 0.0, 1.0, &mut rng(7)));
    let unrelated = tape.variable(Tensor::ones(&[3]));
    let l = tape.sum(x);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    assert_eq!(tape.grad(unrelated).unwrap(), &[0.0; 3]);
}

#[test]
fn backward_twice_accumulates_leaf_grads() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[2], &[1.0, -2.0]));
    let y = tape.scale(x, 3.0);
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0, 6.0]);
    tape.zero_grad();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::ones(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
}

#[test]
fn composite_network_gradients() {
    let mut r = rng(8);
    let x = Tensor::randn(&[2, 2, 6, 6], 0.0, 1.0, &mut r);
    let k = Tensor::randn(&[3, 2, 3, 3], 0.0, 0.5, &mut r);
    let b = Tensor::randn(&[3], 0.0, 0.1, &mut r);
    let w = Tensor::randn(&[12, 4], 0.0, 0.5, &mut r);
    let fb = Tensor::randn(&[4], 0.0, 0.1, &mut r);
    let report = GradChecker::new(1e-5)
        .run(
            |tape, v| {
                let c = tape.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                let a = tape.relu(c);
                let p = tape.pool2d(a, PoolKind::Max, 3, 3, 3, 0)?;
                let flat = tape.reshape(p, &[2, 12])?;
                let logits = tape.fully_connected(flat, v[3], v[4])?;
                tape.softmax_cross_entropy(logits, &[1, 3])
            },
            &[x, k, b, w, fb],
        )
        .unwrap();
    assert!(report.checked > 100);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

// grad_check

#[test]
fn grad_check_quadratic() {
    let x = t(&[2], &[1.0, 2.0]);
    let f = |tape: &mut Tape, x: Var| {
        let sq = tape.mul(x, x)?;
        Ok(tape.sum(sq))
    };
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let l = f(&mut tape, xv).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[2.0, 4.0]);
    let report = grad_check(f, &x, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-6);
    assert_eq!(report.checked, 2);
}

#[test]
fn grad_check_linear_is_exact_to_rounding() {
    let x = t(&[3], &[0.3, -1.2, 4.0]);
    let report = grad_check(
        |tape, x| {
            let y = tape.scale(x, -2.5);
            Ok(tape.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn grad_check_flags_relu_kink() {
    let x = t(&[3], &[0.0, 0.5, -0.5]);
    let report = grad_check(
        |tape, x| {
            let y = tape.relu(x);
            Ok(tape.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.excluded, vec![(0, 0)]);
    assert_eq!(report.checked, 2);
    assert!(report.max_rel_error < 1e-9);
}

#[test]
fn grad_check_reports_non_finite_element() {
    let x = t(&[2], &[1.0, 1e308]);
    let err = grad_check(
        |tape, x| {
            let y = tape.scale(x, 10.0);
            Ok(tape.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap_err();
    match err {
        Error::NonFinite(msg) => assert!(msg.contains("index 1"), "{msg}"),
        other => panic!("unexpected {other}"),
    }
}

/// Every differentiable op on seeded random inputs, away from kinks.
#[test]
fn every_op_passes_grad_check() {
    let mut r = rng(9);
    let checker = GradChecker::new(1e-5);
    let weights = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::randn(shape, 0.0, 1.0, r);

    let probe = weights(&[2, 3, 4, 4], &mut r);
    let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>)> = vec![
        (
            "conv2d",
            vec![
                weights(&[2, 2, 5, 5], &mut r),
                weights(&[3, 2, 3, 3], &mut r),
                weights(&[3], &mut r),
            ],
            Box::new(move |tape, v| {
                let y = tape.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            }),
        ),
        (
            "max_pool",
            vec![weights(&[1, 2, 5, 5], &mut r)],
            Box::new(|tape, v| {
                let y = tape.pool2d(v[0], PoolKind::Max, 3, 3, 2, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            }),
        ),
        (
            "avg_pool",
            vec![weights(&[1, 2, 4, 4], &mut r)],
            Box::new(|tape, v| {
                let y = tape.pool2d(v[0], PoolKind::Avg, 2, 2, 2, 0)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            }),
        ),
        (
            "relu",
            vec![away_from_zero(&[12], 1e-3, &mut r)],
            Box::new(|tape, v| {
                let y = tape.relu(v[0]);
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            }),
        ),
        (
            "sigmoid_scaled",
            vec![weights(&[10], &mut r)],
            Box::new(|tape, v| {
                let y = tape.sigmoid_scaled(v[0], 0.7)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            }),
        ),
        (
            "batch_norm2d",
            vec![weights(&[2, 3, 4, 4], &mut r), weights(&[3], &mut r), weights(&[3], &mut r)],
            Box::new(move |tape, v| {
                let y = tape.batch_norm2d(v[0], v[1], v[2], 1e-5, BatchNormMode::Train)?;
                let p = tape.constant(probe.clone());
                let q = tape.mul(y, p)?;
                let sq = tape.mul(q, y)?;
                Ok(tape.sum(sq))
            }),
        ),
        (
            "upsample_nearest2",
            vec![weights(&[1, 2, 3, 3], &mut r)],
            Box::new(|tape, v| {
                let y = tape.upsample_nearest2(v[0])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            }),
        ),
        (
            "add",
            vec![weights(&[6], &mut r), weights(&[6], &mut r)],
            Box::new(|tape, v| {
                let y = tape.add(v[0], v[1])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            }),
        ),
        (
            "fully_connected",
            vec![weights(&[3, 4], &mut r), weights(&[4, 5], &mut r), weights(&[5], &mut r)],
            Box::new(|tape, v| {
                let y = tape.fully_connected(v[0], v[1], v[2])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            }),
        ),
        (
            "softmax_cross_entropy",
            vec![weights(&[4, 6], &mut r)],
            Box::new(|tape, v| tape.softmax_cross_entropy(v[0], &[0, 5, 2, 2])),
        ),
        (
            "sigmoid_bce",
            vec![weights(&[8], &mut r)],
            Box::new(|tape, v| tape.sigmoid_bce(v[0], &[0, 3, 4, 7], &[1.0, 0.0, 1.0, 0.0])),
        ),
        (
            "smooth_l1",
            vec![weights(&[8], &mut r)],
            Box::new(|tape, v| tape.smooth_l1(v[0], &[1, 2, 6], &[0.05, -3.0, 0.4], 1.0 / 9.0, 2.0)),
        ),
        (
            "roi_pool",
            vec![weights(&[2, 2, 6, 6], &mut r)],
            Box::new(|tape, v| {
                let regions = [
                    RoiRegion { batch: 1, x1: 0.5, y1: 1.2, x2: 5.1, y2: 4.0 },
                    RoiRegion { batch: 0, x1: 2.0, y1: 2.0, x2: 3.0, y2: 3.0 },
                ];
                let y = tape.roi_pool(v[0], &regions, 3)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            }),
        ),
        (
            "concat+reshape",
            vec![weights(&[2, 3], &mut r), weights(&[1, 3], &mut r)],
            Box::new(|tape, v| {
                let c = tape.concat(&[v[0], v[1]])?;
                let flat = tape.reshape(c, &[9])?;
                let sq = tape.mul(flat, flat)?;
                Ok(tape.sum(sq))
            }),
        ),
    ];
    for (name, inputs, f) in cases {
        let report = checker.run(|tape, v| f(tape, v), &inputs).unwrap();
        assert!(report.checked > 0, "{name}: nothing checked");
        assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
    }
}

#[test]
fn identical_inputs_give_bit_identical_results() {
    let run = || {
        let mut r = rng(11);
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::randn(&[2, 2, 8, 8], 0.0, 1.0, &mut r));
        let k = tape.variable(Tensor::randn(&[4, 2, 3, 3], 0.0, 1.0, &mut r));
        let g = tape.variable(Tensor::ones(&[4]));
        let b = tape.variable(Tensor::zeros(&[4]));
        let c = tape.conv2d(x, k, None, 1, 1).unwrap();
        let n = tape.batch_norm2d(c, g, b, 1e-5, BatchNormMode::Train).unwrap();
        let s = tape.sigmoid_scaled(n, 0.5).unwrap();
        let m = tape.mul(s, c).unwrap();
        let l = tape.sum(m);
        tape.backward(l).unwrap();
        (
            tape.value(l).clone(),
            tape.grad(x).unwrap().to_vec(),
            tape.grad(k).unwrap().to_vec(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn roi_pool_single_cell_region() {
    let x = Tensor::randn(&[1, 2, 4, 4], 0.0, 1.0, &mut rng(12));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape
        .roi_pool(xv, &[RoiRegion { batch: 0, x1: 1.0, y1: 2.0, x2: 2.0, y2: 3.0 }], 7)
        .unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 7, 7]);
    for ch in 0..2 {
        let cell = x.data()[ch * 16 + 2 * 4 + 1];
        assert!(tape.value(y).data()[ch * 49..(ch + 1) * 49].iter().all(|v| *v == cell));
    }
    let bad = RoiRegion { batch: 0, x1: 1.0, y1: 1.0, x2: 1.0, y2: 2.0 };
    assert!(tape.roi_pool(xv, &[bad], 7).is_err());
}
