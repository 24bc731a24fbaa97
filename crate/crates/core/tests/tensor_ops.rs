//! Oracle tests for the autodiff ops: forward results against brute-force
//! reimplementations written here (no shared code with the library), and
//! backward results against central finite differences.

use proptest::prelude::*;
use rand::Rng;
use segrobust::rng;
use segrobust::tensor::gradcheck::check_gradients;
use segrobust::tensor::{Tape, Tensor};

/// Cross-correlation with same zero padding, written as the naive six
/// nested loops straight from the definition.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; f * h * w];
    for fo in 0..f {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[fo];
                for ci in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            let iy = y as isize + u as isize - (kh / 2) as isize;
                            let ix = x as isize + v as isize - (kw / 2) as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kernel[((fo * c + ci) * kh + u) * kw + v]
                                * input[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(fo * h + y) * w + x] = acc;
            }
        }
    }
    out
}

fn random_tensor(stream: &mut rng::Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng::uniform_f64(stream, lo, hi)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn conv2d_matches_six_loop_oracle() {
    let mut stream = rng::stream(11);
    for case in 0..8 {
        let (c, h, w, f, kh, kw) = match case % 4 {
            0 => (1, 4, 4, 2, 3, 3),
            1 => (3, 5, 7, 2, 3, 3),
            2 => (2, 6, 4, 4, 5, 3),
            _ => (1, 8, 8, 1, 1, 1),
        };
        let input = random_tensor(&mut stream, &[c, h, w], -2.0, 2.0);
        let kernel = random_tensor(&mut stream, &[f, c, kh, kw], -1.0, 1.0);
        let bias = random_tensor(&mut stream, &[f], -0.5, 0.5);

        let expected = conv_oracle(
            input.data(),
            kernel.data(),
            bias.data(),
            c,
            h,
            w,
            f,
            kh,
            kw,
        );

        let mut tape = Tape::new();
        let (xi, ki, bi) = (tape.input(input), tape.input(kernel), tape.input(bias));
        let out = tape.conv2d(xi, ki, bi).unwrap();
        for (i, (got, want)) in tape.value(out).data().iter().zip(&expected).enumerate() {
            assert!(
                (got - want).abs() < 1e-6,
                "case {case}, flat index {i}: tape {got}, oracle {want}"
            );
        }
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut stream = rng::stream(12);
    let input = random_tensor(&mut stream, &[2, 4, 4], -1.0, 1.0);
    let kernel = random_tensor(&mut stream, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = random_tensor(&mut stream, &[3], -0.5, 0.5);
    let report = check_gradients(
        &[("input", input), ("kernel", kernel), ("bias", bias)],
        1e-6,
        |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], vars[2])?;
            Ok(tape.sum(y))
        },
    )
    .unwrap();
    assert!(report.passed(), "{}", report.describe());
}

#[test]
fn relu_gradient_matches_finite_differences_away_from_zero() {
    let mut stream = rng::stream(13);
    // keep every entry at least 0.1 from the kink so central differences
    // with step 1e-5 never straddle it
    let data: Vec<f64> = (0..16)
        .map(|_| {
            let v = rng::uniform_f64(&mut stream, 0.1, 1.5);
            if stream.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::new(&[16], data).unwrap();
    let report = check_gradients(&[("x", x)], 1e-6, |tape, vars| {
        let y = tape.relu(vars[0]);
        let sq = tape.mul(y, y)?;
        Ok(tape.sum(sq))
    })
    .unwrap();
    assert!(report.passed(), "{}", report.describe());
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    // distinct entries with gaps well above the FD step keep the argmax stable
    let data: Vec<f64> = (0..16).map(|i| (i as f64) * 0.37 - 3.0).collect();
    let mut shuffled = data.clone();
    shuffled.reverse();
    for (x, base) in [(data, "ascending"), (shuffled, "descending")] {
        let x = Tensor::new(&[1, 4, 4], x).unwrap();
        let report = check_gradients(&[("x", x)], 1e-6, |tape, vars| {
            let y = tape.maxpool2x2(vars[0])?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passed(), "{base}: {}", report.describe());
    }
}

#[test]
fn upsample_gradient_matches_finite_differences() {
    let mut stream = rng::stream(14);
    let x = random_tensor(&mut stream, &[2, 3, 3], -1.0, 1.0);
    let report = check_gradients(&[("x", x)], 1e-6, |tape, vars| {
        let y = tape.upsample2x2(vars[0])?;
        let sq = tape.mul(y, y)?;
        Ok(tape.sum(sq))
    })
    .unwrap();
    assert!(report.passed(), "{}", report.describe());
}

#[test]
fn elementwise_chain_gradients_match_finite_differences() {
    let mut stream = rng::stream(15);
    let a = random_tensor(&mut stream, &[8], 0.2, 0.8);
    let b = random_tensor(&mut stream, &[8], 0.2, 0.8);
    let report = check_gradients(&[("a", a), ("b", b)], 1e-6, |tape, vars| {
        // mix of every scalar op: ((a·b) + σ(a) − log b)^1.7, clamped, averaged
        let prod = tape.mul(vars[0], vars[1])?;
        let sig = tape.sigmoid(vars[0]);
        let lb = tape.log(vars[1]);
        let s = tape.add(prod, sig)?;
        let d = tape.sub(s, lb)?;
        let sh = tape.affine(d, 0.5, 1.0);
        let p = tape.pow_const(sh, 1.7);
        let cl = tape.clamp(p, 0.3, 5.0);
        Ok(tape.mean(cl))
    })
    .unwrap();
    assert!(report.passed(), "{}", report.describe());
}

#[test]
fn linear_map_gradient_is_exact() {
    let w = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let x = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let report = check_gradients(&[("w", w), ("x", x)], 1e-9, |tape, vars| {
        let p = tape.mul(vars[0], vars[1])?;
        Ok(tape.sum(p))
    })
    .unwrap();
    assert!(report.passed(), "{}", report.describe());
}

#[test]
fn constant_graph_has_zero_gradients() {
    let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let report = check_gradients(&[("x", x)], 1e-9, |tape, _vars| {
        let c = tape.input(Tensor::scalar(5.0));
        Ok(tape.scale(c, 2.0))
    })
    .unwrap();
    assert!(report.passed(), "{}", report.describe());
    assert_eq!(report.max_rel_error(), 0.0);
}

#[test]
fn fanout_grad_equals_sum_of_single_consumer_grads() {
    // graph surgery: y = sum(σ(x)·x) with x feeding both consumers, versus
    // the two graphs where one occurrence of x is frozen as a constant
    let xdata = vec![0.3, -0.8, 1.4];
    let grad_of = |freeze_first: Option<bool>| -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[3], xdata.clone()).unwrap());
        let frozen = tape.input(Tensor::new(&[3], xdata.clone()).unwrap());
        let (sig_arg, mul_arg) = match freeze_first {
            None => (x, x),
            Some(true) => (frozen, x),
            Some(false) => (x, frozen),
        };
        let s = tape.sigmoid(sig_arg);
        let p = tape.mul(s, mul_arg).unwrap();
        let root = tape.sum(p);
        tape.backward(root).unwrap();
        tape.grad(x).data().to_vec()
    };
    let fanout = grad_of(None);
    let only_mul = grad_of(Some(true));
    let only_sig = grad_of(Some(false));
    for i in 0..3 {
        assert!(
            (fanout[i] - (only_mul[i] + only_sig[i])).abs() < 1e-12,
            "index {i}: {} vs {} + {}",
            fanout[i],
            only_mul[i],
            only_sig[i]
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concat_slicing_recovers_inputs(
        ca in 1usize..4,
        cb in 1usize..4,
        h in 1usize..6,
        w in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut stream = rng::stream(seed);
        let a = random_tensor(&mut stream, &[ca, h, w], -3.0, 3.0);
        let b = random_tensor(&mut stream, &[cb, h, w], -3.0, 3.0);
        let mut tape = Tape::new();
        let (ai, bi) = (tape.input(a.clone()), tape.input(b.clone()));
        let y = tape.concat_channels(ai, bi).unwrap();
        let out = tape.value(y);
        prop_assert_eq!(out.shape(), &[ca + cb, h, w]);
        prop_assert_eq!(&out.data()[..ca * h * w], a.data());
        prop_assert_eq!(&out.data()[ca * h * w..], b.data());
    }

    #[test]
    fn finite_inputs_never_produce_nonfinite_values_or_grads(
        seed in 0u64..1000,
        scale in 1.0f64..400.0,
    ) {
        let mut stream = rng::stream(seed);
        let x = random_tensor(&mut stream, &[2, 4, 4], -scale, scale);
        let k = random_tensor(&mut stream, &[1, 2, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut stream, &[1], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xi, ki, bi) = (tape.input(x), tape.input(k), tape.input(b));
        let conv = tape.conv2d(xi, ki, bi).unwrap();
        let act = tape.relu(conv);
        let pooled = tape.maxpool2x2(act).unwrap();
        let probs = tape.sigmoid(pooled);
        let clamped = tape.clamp(probs, 1e-7, 1.0 - 1e-7);
        let logp = tape.log(clamped);
        let root = tape.mean(logp);
        tape.backward(root).unwrap();
        prop_assert!(tape.value(root).is_finite());
        for v in [xi, ki, bi] {
            prop_assert!(tape.grad(v).is_finite(), "non-finite grad");
        }
    }
}
