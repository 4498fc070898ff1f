use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volcast_autodiff::{grad_check, AutodiffError, Tape, Tensor, LEAKY_SLOPE};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Nested-loop zero-padded cross-correlation, written independently of the
/// library kernel.
fn naive_conv(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, pad: usize) -> Vec<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = y as isize + dy as isize - pad as isize;
                            let ix = xx as isize + dx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k.data()[((o * ci + c) * kh + dy) * kw + dx]
                                * x.data()[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let x = tape.constant(random_tensor(&mut rng, &[1, 20, 20]));
    let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = tape.conv2d(x, k, None, 0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn conv_zero_kernel_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::new();
    let x = tape.constant(random_tensor(&mut rng, &[3, 20, 20]));
    let k = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.conv2d(x, k, Some(b), 1).unwrap();
    assert_eq!(tape.shape(y), vec![2, 20, 20]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_ones_kernel_sums_neighbourhoods() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 4, 4], (1..=16).map(f64::from).collect()).unwrap());
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.value(tape.conv2d(x, k, None, 1).unwrap());
    // Oracle: explicit neighbourhood sum on the 4x4 grid of 1..16.
    let grid = |r: isize, c: isize| -> f64 {
        if (0..4).contains(&r) && (0..4).contains(&c) {
            (r * 4 + c + 1) as f64
        } else {
            0.0
        }
    };
    for r in 0..4isize {
        for c in 0..4isize {
            let mut s = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    s += grid(r + dr, c + dc);
                }
            }
            assert_eq!(y.data()[(r * 4 + c) as usize], s);
        }
    }
    // Spot values computed by hand: corner (0,0) = 1+2+5+6, centre (1,1) = 1+2+3+5+6+7+9+10+11.
    assert_eq!(y.data()[0], 14.0);
    assert_eq!(y.data()[5], 54.0);
}

#[test]
fn conv_matches_naive_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = random_tensor(&mut rng, &[3, 7, 6]);
    let kt = random_tensor(&mut rng, &[4, 3, 3, 3]);
    let bt = random_tensor(&mut rng, &[4]);
    for pad in [0, 1] {
        let tape = Tape::new();
        let (x, k, b) = (
            tape.constant(xt.clone()),
            tape.constant(kt.clone()),
            tape.constant(bt.clone()),
        );
        let y = tape.value(tape.conv2d(x, k, Some(b), pad).unwrap());
        let expected = naive_conv(&xt, &kt, Some(&bt), pad);
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_shape_errors_are_descriptive() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 5, 5]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = tape.conv2d(x, k, None, 1).unwrap_err();
    assert!(matches!(err, AutodiffError::Shape { op: "conv2d", .. }));
    assert!(err.to_string().contains("3 input channels"));
    let k = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(tape.conv2d(x, k, None, 2).is_err());
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::full(&[4], 0.7));
    let y = tape.value(tape.softmax(c, 0).unwrap());
    assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = tape.constant(Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap());
    let y = tape.value(tape.softmax(x, 0).unwrap());
    assert!((y.data()[0] - 0.25).abs() < 1e-15);
    assert!((y.data()[1] - 0.75).abs() < 1e-15);

    let empty = tape.constant(Tensor::zeros(&[0]));
    assert!(matches!(
        tape.softmax(empty, 0),
        Err(AutodiffError::EmptyAxis { .. })
    ));
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
        // Oracle: unshifted exp / sum with compensated summation.
        let exps: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for e in &exps {
            let yk = e - comp;
            let t = sum + yk;
            comp = (t - sum) - yk;
            sum = t;
        }
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[5], v).unwrap());
        let y = tape.value(tape.softmax(x, 0).unwrap());
        for (a, e) in y.data().iter().zip(&exps) {
            assert!((a - e / sum).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_extreme_rows_normalised() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = Tensor::from_fn(&[6, 50], |_| rng.random_range(-1e3..1e3));
    let tape = Tape::new();
    let y = tape.value(tape.softmax(tape.constant(t), 1).unwrap());
    assert!(y.all_finite());
    for row in y.data().chunks(50) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn grad_check_sum_of_squares() {
    let point = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let report = grad_check(|t, x| Ok(t.sum(t.square(x))), &point, 1e-8).unwrap();
    assert_eq!(report.analytic, vec![2.0, 4.0, 6.0]);
    assert!(report.passed(), "{}", report.max_rel_error);
}

#[test]
fn grad_check_rejects_non_scalar() {
    let point = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let err = grad_check(|t, x| Ok(t.square(x)), &point, 1e-4).unwrap_err();
    assert!(matches!(err, AutodiffError::NonScalar { .. }));
}

#[test]
fn grad_check_conv_layer() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let x = random_tensor(&mut rng, &[3, 6, 6]);
        let k = random_tensor(&mut rng, &[2, 3, 3, 3]);
        let b = random_tensor(&mut rng, &[2]);
        let w = random_tensor(&mut rng, &[2, 6, 6]);
        let (k2, b2, w2) = (k.clone(), b.clone(), w.clone());
        // with respect to the input
        let report = grad_check(
            move |t, x| {
                let y = t.conv2d(x, t.constant(k2.clone()), Some(t.constant(b2.clone())), 1)?;
                Ok(t.sum(t.mul(y, t.constant(w2.clone()))?))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "input {}", report.max_rel_error);
        // with respect to the kernel
        let (x2, w2) = (x.clone(), w.clone());
        let report = grad_check(
            move |t, k| {
                let y = t.conv2d(t.constant(x2.clone()), k, Some(t.constant(b.clone())), 1)?;
                Ok(t.sum(t.mul(y, t.constant(w2.clone()))?))
            },
            &k,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "kernel {}", report.max_rel_error);
        // with respect to the bias, unpadded
        let report = grad_check(
            move |t, b| {
                let y = t.conv2d(t.constant(x.clone()), t.constant(k.clone()), Some(b), 0)?;
                Ok(t.sum(t.square(y)))
            },
            &random_tensor(&mut rng, &[2]),
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "bias {}", report.max_rel_error);
    }
}

#[test]
fn grad_check_elementwise_ops() {
    type Build = fn(&Tape, volcast_autodiff::Var) -> volcast_autodiff::Result<volcast_autodiff::Var>;
    let cases: Vec<(&str, Build)> = vec![
        ("sigmoid", |t, x| Ok(t.sigmoid(x))),
        ("tanh", |t, x| Ok(t.tanh(x))),
        ("softplus", |t, x| Ok(t.softplus(x))),
        ("leaky_relu", |t, x| Ok(t.leaky_relu(x, LEAKY_SLOPE))),
        ("exp", |t, x| Ok(t.exp(x))),
        ("ln", |t, x| Ok(t.ln(t.offset(t.square(x), 0.5)))),
        ("sqrt", |t, x| Ok(t.sqrt(t.offset(t.square(x), 0.5)))),
        ("norm_cdf", |t, x| Ok(t.norm_cdf(t.scale(x, 2.0)))),
        ("norm_pdf", |t, x| Ok(t.norm_pdf(x))),
        ("abs", |t, x| Ok(t.abs(x))),
        ("clamp_min", |t, x| Ok(t.clamp_min(x, 0.05))),
        ("div", |t, x| t.div(t.tanh(t.scale(x, 1.7)), t.offset(t.square(x), 1.0))),
        ("softmax", |t, x| {
            let m = t.reshape(x, &[2, 3])?;
            t.softmax(m, 1)
        }),
        ("softmax_axis0", |t, x| {
            let m = t.reshape(x, &[2, 3])?;
            t.softmax(m, 0)
        }),
    ];
    for (name, build) in cases {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let point = random_tensor(&mut rng, &[6]);
            let weights = random_tensor(&mut rng, &[6]);
            let report = grad_check(
                |t, x| {
                    let y = build(t, x)?;
                    let y = t.reshape(y, &[6])?;
                    Ok(t.sum(t.mul(y, t.constant(weights.clone()))?))
                },
                &point,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{name} seed {seed}: {}", report.max_rel_error);
        }
    }
}

#[test]
fn grad_check_shape_ops() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let a = random_tensor(&mut rng, &[3, 4]);
        let bias = random_tensor(&mut rng, &[3, 1]);
        let w = random_tensor(&mut rng, &[4, 4]);
        let report = grad_check(
            |t, x| {
                let m = t.matmul(x, t.constant(a.clone()))?; // [4,4]
                let mt = t.transpose(m)?;
                let s = t.slice(mt, 0, 1, 3)?; // [3,4]
                let p = t.add(s, t.constant(bias.clone()))?;
                let c = t.concat(&[p, t.slice(mt, 0, 0, 1)?], 0)?; // [4,4]
                let padded = t.pad(c, 1, 1, 6)?;
                let back = t.slice(padded, 1, 1, 4)?;
                let r = t.mul(back, t.constant(w.clone()))?;
                let st = t.sum_to(r, &[1, 4])?;
                let bt = t.broadcast_to(st, &[2, 4])?;
                Ok(t.sum(t.square(bt)))
            },
            &random_tensor(&mut rng, &[4, 3]),
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {}", report.max_rel_error);
    }
}

#[test]
fn broadcast_mul_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let big = random_tensor(&mut rng, &[3, 4, 4]);
        let report = grad_check(
            |t, x| {
                let y = t.mul(t.constant(big.clone()), x)?;
                Ok(t.sum(t.square(y)))
            },
            &random_tensor(&mut rng, &[1, 4, 4]),
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_error);
    }
}

#[test]
fn higher_order_matches_finite_differences() {
    // f(x) = sum(softplus(x W + b) v); check d/dx via grad_graph, then
    // d2f/dx0^2 via a second grad_graph against second central differences.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let wt = random_tensor(&mut rng, &[2, 5]);
    let bt = random_tensor(&mut rng, &[5]);
    let vt = random_tensor(&mut rng, &[5, 1]);
    let f_value = |x0: f64, x1: f64| -> f64 {
        (0..5)
            .map(|j| {
                let z = x0 * wt.data()[j] + x1 * wt.data()[5 + j] + bt.data()[j];
                let sp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                sp * vt.data()[j]
            })
            .sum()
    };
    let (x0, x1) = (0.3, -0.4);
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1, 2], vec![x0, x1]).unwrap());
    let h = tape.softplus(
        tape.add(
            tape.matmul(x, tape.constant(wt.clone())).unwrap(),
            tape.constant(bt.clone()),
        )
        .unwrap(),
    );
    let y = tape.sum(tape.matmul(h, tape.constant(vt.clone())).unwrap());
    let gx = tape.grad_graph(y, &[x]).unwrap()[0];
    let g = tape.value(gx);
    let eps = 1e-5;
    let fd0 = (f_value(x0 + eps, x1) - f_value(x0 - eps, x1)) / (2.0 * eps);
    assert!((g.data()[0] - fd0).abs() / fd0.abs().max(1e-6) < 1e-7);

    let g0 = tape.sum(tape.slice(gx, 1, 0, 1).unwrap());
    let hx = tape.grad_graph(g0, &[x]).unwrap()[0];
    let second = tape.value(hx).data()[0];
    let eps = 1e-4;
    let fd2 = (f_value(x0 + eps, x1) - 2.0 * f_value(x0, x1) + f_value(x0 - eps, x1)) / (eps * eps);
    assert!((second - fd2).abs() / fd2.abs().max(1e-6) < 1e-3, "{second} vs {fd2}");

    // The second derivative node is itself differentiable by backward.
    let grads = tape.backward(tape.sum(hx)).unwrap();
    assert!(grads.get(x).is_some());
}

#[test]
fn higher_order_rejects_conv() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.sum(tape.conv2d(x, k, None, 1).unwrap());
    assert!(matches!(
        tape.grad_graph(y, &[x]),
        Err(AutodiffError::HigherOrderUnsupported { op: "conv2d" })
    ));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut rng, &[2, 8, 8]));
        let k = tape.leaf(random_tensor(&mut rng, &[3, 2, 3, 3]));
        let y = tape.tanh(tape.conv2d(x, k, None, 1).unwrap());
        let s = tape.sum(tape.square(y));
        let g = tape.backward(s).unwrap();
        (tape.value(y), g.get(k).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}

proptest! {
    #[test]
    fn conv_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = random_tensor(&mut rng, &[2, 5, 5]);
        let yt = random_tensor(&mut rng, &[2, 5, 5]);
        let kt = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let tape = Tape::new();
        let (x, y, k) = (tape.constant(xt), tape.constant(yt), tape.constant(kt));
        let combo = tape.add(tape.scale(x, a), tape.scale(y, b)).unwrap();
        let lhs = tape.value(tape.conv2d(combo, k, None, 1).unwrap());
        let cx = tape.conv2d(x, k, None, 1).unwrap();
        let cy = tape.conv2d(y, k, None, 1).unwrap();
        let rhs = tape.value(tape.add(tape.scale(cx, a), tape.scale(cy, b)).unwrap());
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let n = values.len();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[n], values).unwrap());
        let y = tape.value(tape.softmax(x, 0).unwrap());
        prop_assert!((y.sum() - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
