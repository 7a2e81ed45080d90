use diffcore::{
    finite_diff_check, GradCheck, Graph, Kernel, SampleMode, Tensor, UnaryOp, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Reduce an arbitrary output to a scalar with fixed random weights so every
/// output coordinate contributes a distinct amount.
fn weighted_total(g: &mut Graph, out: Var, seed: u64) -> diffcore::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let w = g.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check(params: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> diffcore::Result<Var>) -> f64 {
    let cfg = GradCheck::default();
    finite_diff_check(f, params, &cfg).unwrap().max_rel_error
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[3.0, 4.0]));
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);

    let z = g.constant(t(&[2], &[0.0, f64::MIN]));
    let e = g.elu(z).unwrap();
    assert_eq!(g.value(e).data()[0], 0.0);
    assert_eq!(g.value(e).data()[1], -1.0);

    let zero = g.constant(Tensor::scalar(0.0));
    let sg = g.sigmoid(zero).unwrap();
    assert_eq!(g.value(sg).item(), 0.5);
}

#[test]
fn division_by_zero_reports_node() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[1.0, 0.0]));
    let err = g.div(a, b).unwrap_err();
    assert_eq!(err, diffcore::DiffError::DivisionByZero { node: 2 });
    assert!(g.recip(b).is_err());
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, b).is_err());
    let w = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.linear(a, w, None).is_err());
}

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1.0, 0.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(Tensor::zeros(&[2]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);

    let x = g.constant(t(&[2], &[1.0, 1.0]));
    let w = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let b = g.leaf(t(&[1], &[-2.0]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[0.0]);

    let mut g = Graph::new();
    let x = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let w = g.leaf(t(&[2, 2], &[0.5, -1.0, 2.0, 0.0]));
    let b = g.leaf(Tensor::zeros(&[2]));
    let y = g.linear(x, w, Some(b)).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(b).data(), &[3.0, 3.0]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2], &[0.0, 0.0]));
    let y = g.softmax_channels(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    // exp(-20) / (1 + exp(-20)) evaluated in closed form
    let x = g.constant(t(&[1, 1, 2], &[20.0, 0.0]));
    let y = g.softmax_channels(x).unwrap();
    let small = (-20.0f64).exp() / (1.0 + (-20.0f64).exp());
    assert!((g.value(y).data()[1] - small).abs() < 1e-20);
    assert!((g.value(y).data()[1] - 2.0611536e-9).abs() < 1e-15);
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-8);
}

#[test]
fn bilinear_examples() {
    let mut g = Graph::new();
    let src = g.constant(t(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]));
    let at_node = g.constant(t(&[1, 2], &[1.0, 1.0]));
    let (v, valid) = g
        .bilinear_sample(src, at_node, SampleMode::Full, 0.0)
        .unwrap();
    assert_eq!(g.value(v).data(), &[3.0]);
    assert_eq!(valid.data(), &[1.0]);

    let centre = g.constant(t(&[1, 2], &[0.5, 0.5]));
    let (v, _) = g
        .bilinear_sample(src, centre, SampleMode::Full, 0.0)
        .unwrap();
    assert_eq!(g.value(v).data(), &[1.5]);

    let far = g.constant(t(&[1, 2], &[-10.0, -10.0]));
    let (v, valid) = g.bilinear_sample(src, far, SampleMode::Full, 0.0).unwrap();
    assert_eq!(g.value(v).data(), &[0.0]);
    assert_eq!(valid.data(), &[0.0]);

    // half the footprint falls off the left edge
    let edge = g.constant(t(&[1, 2], &[-0.5, 0.0]));
    let (v, valid) = g
        .bilinear_sample(src, edge, SampleMode::Full, -30.0)
        .unwrap();
    assert_eq!(valid.data(), &[0.5]);
    assert_eq!(g.value(v).data(), &[-15.0]);
}

#[test]
fn bilinear_diagonal_reads_matching_channel() {
    let mut g = Graph::new();
    // 1x2 image, 2 channels: pixel0 = (1, 10), pixel1 = (2, 20)
    let src = g.constant(t(&[1, 2, 2], &[1.0, 10.0, 2.0, 20.0]));
    // one output pixel with two samples: channel 0 at x=1, channel 1 at x=0
    let coords = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let (v, valid) = g
        .bilinear_sample(src, coords, SampleMode::Diagonal, 0.0)
        .unwrap();
    assert_eq!(g.shape(v), &[1, 1, 2]);
    assert_eq!(g.value(v).data(), &[2.0, 10.0]);
    assert_eq!(valid.shape(), &[1, 1, 2]);
}

#[test]
fn conv_examples() {
    let mut g = Graph::new();
    let k5 = Kernel::box_filter(5).unwrap();
    let c = g.constant(Tensor::full(&[7, 7, 2], 0.3));
    let y = g.conv2d_fixed(c, &k5).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 0.3).abs() < 1e-15));

    let mut imp = Tensor::zeros(&[9, 9, 1]);
    imp.data_mut()[4 * 9 + 4] = 1.0;
    let x = g.constant(imp);
    let y = g.conv2d_fixed(x, &k5).unwrap();
    let out = g.value(y).data();
    for r in 0..9 {
        for c in 0..9 {
            let inside = (2..=6).contains(&r) && (2..=6).contains(&c);
            let want = if inside { 1.0 / 25.0 } else { 0.0 };
            assert!((out[r * 9 + c] - want).abs() < 1e-15);
        }
    }

    // unit-sum Gaussian keeps the mean of an image whose reflection is seamless
    let gauss = Kernel::gaussian(21, 3.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random(&mut rng, &[32, 32, 1], 0.0, 1.0);
    let mean_in = img.mean();
    let x = g.constant(img);
    let y = g.conv2d_fixed(x, &gauss).unwrap();
    assert!((g.value(y).mean() - mean_in).abs() < 0.02);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
    let unused = g.leaf(t(&[2], &[4.0, 5.0]));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);
    assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 1.0]);

    // non-scalar loss
    assert!(g.backward(sq).is_err());
}

#[test]
fn softmax_weighted_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random(&mut rng, &[2, 2, 4], -2.0, 2.0);
    let values = random(&mut rng, &[2, 2, 4, 3], -0.5, 0.5);
    let err = check(&[logits, values], |g, v| {
        let p = g.softmax_channels(v[0])?;
        let s = g.weighted_sum(p, v[1])?;
        weighted_total(g, s, 5)
    });
    assert!(err < 1e-6, "rel error {err}");
}

#[test]
fn every_primitive_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[2, 3, 4], -1.5, 1.5);
    let b = random(&mut rng, &[2, 3, 4], 0.5, 1.5);
    let bc = random(&mut rng, &[2, 3, 1], 0.5, 1.5);
    let s = Tensor::scalar(0.7);

    for kind in [
        UnaryOp::Abs,
        UnaryOp::Elu,
        UnaryOp::Sigmoid,
        UnaryOp::Exp,
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Neg,
    ] {
        let err = check(std::slice::from_ref(&a), |g, v| {
            let y = g.unary(kind, v[0])?;
            weighted_total(g, y, 1)
        });
        assert!(err < 1e-5, "{kind:?}: {err}");
    }
    let err = check(std::slice::from_ref(&b), |g, v| {
        let y = g.recip(v[0])?;
        weighted_total(g, y, 1)
    });
    assert!(err < 1e-5, "recip {err}");

    for rhs in [&b, &bc, &s] {
        let err = check(&[a.clone(), rhs.clone()], |g, v| {
            let s1 = g.add(v[0], v[1])?;
            let s2 = g.sub(v[0], v[1])?;
            let s3 = g.mul(v[0], v[1])?;
            let s4 = g.div(v[0], v[1])?;
            let t1 = g.add(s1, s2)?;
            let t2 = g.mul(s3, s4)?;
            let t3 = g.add(t1, t2)?;
            weighted_total(g, t3, 2)
        });
        assert!(err < 1e-5, "binary with rhs {:?}: {err}", rhs.shape());
    }

    let err = check(std::slice::from_ref(&a), |g, v| {
        let y = g.affine(v[0], -1.5, 0.25)?;
        let y = g.clamp(y, -0.9, 0.9)?;
        weighted_total(g, y, 3)
    });
    assert!(err < 1e-5, "affine/clamp {err}");

    let w = random(&mut rng, &[4, 5], -1.0, 1.0);
    let bias = random(&mut rng, &[5], -1.0, 1.0);
    let err = check(&[a.clone(), w, bias], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        weighted_total(g, y, 4)
    });
    assert!(err < 1e-5, "linear {err}");

    let err = check(std::slice::from_ref(&a), |g, v| {
        let y = g.softmax_channels(v[0])?;
        weighted_total(g, y, 5)
    });
    assert!(err < 1e-5, "softmax {err}");

    let err = check(&[a.clone(), b.clone()], |g, v| {
        let c = g.concat(&[v[0], v[1]])?;
        let s = g.slice(c, 1, 1, 3)?;
        let s = g.slice(s, 2, 2, 7)?;
        let r = g.reshape(s, &[10, 2])?;
        weighted_total(g, r, 6)
    });
    assert!(err < 1e-5, "layout {err}");

    let vec6 = random(&mut rng, &[6], -1.0, 1.0);
    let err = check(&[vec6], |g, v| {
        let y = g.tile(v[0], &[3, 2])?;
        weighted_total(g, y, 7)
    });
    assert!(err < 1e-5, "tile {err}");

    let err = check(std::slice::from_ref(&a), |g, v| {
        let m = g.mean(v[0])?;
        let s = g.sum(v[0])?;
        let y = g.mul(m, s)?;
        Ok(y)
    });
    assert!(err < 1e-5, "reductions {err}");
}

#[test]
fn bilinear_and_conv_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let src = random(&mut rng, &[4, 5, 3], -0.5, 0.5);
    // keep coordinates away from integer nodes where the gradient has kinks
    let coords = Tensor::from_fn(&[2, 3, 2], |i| {
        let base = if i % 2 == 0 { 4.0 } else { 3.0 };
        rng.gen_range(-1.0..base + 1.0) + 0.013
    });
    for fill in [0.0, -30.0] {
        let err = check(&[src.clone(), coords.clone()], |g, v| {
            let (y, _) = g.bilinear_sample(v[0], v[1], SampleMode::Full, fill)?;
            weighted_total(g, y, 8)
        });
        assert!(err < 1e-5, "bilinear fill={fill}: {err}");
    }

    let dsrc = random(&mut rng, &[4, 5, 3], -1.0, 1.0);
    let dcoords = Tensor::from_fn(&[2, 2, 3, 2], |_| rng.gen_range(-0.8..4.3) + 0.011);
    let err = check(&[dsrc, dcoords], |g, v| {
        let (y, _) = g.bilinear_sample(v[0], v[1], SampleMode::Diagonal, -30.0)?;
        weighted_total(g, y, 9)
    });
    assert!(err < 1e-5, "bilinear diagonal: {err}");

    let img = random(&mut rng, &[6, 7, 2], -0.5, 0.5);
    let k = Kernel::box_filter(5).unwrap();
    let err = check(&[img], |g, v| {
        let y = g.conv2d_fixed(v[0], &k)?;
        weighted_total(g, y, 10)
    });
    assert!(err < 1e-5, "conv {err}");
}

#[test]
fn finite_diff_check_examples() {
    let x = t(&[3], &[0.3, -1.2, 2.0]);
    // quadratic form x^T A x with a fixed symmetric A
    let report = finite_diff_check(
        |g: &mut Graph, v: &[Var]| {
            let a = g.constant(t(&[3, 3], &[2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]));
            let ax = g.linear(v[0], a, None)?;
            let q = g.mul(ax, v[0])?;
            g.sum(q)
        },
        std::slice::from_ref(&x),
        &GradCheck::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);

    let report = finite_diff_check(
        |g: &mut Graph, _v: &[Var]| {
            let c = g.constant(Tensor::scalar(4.0));
            Ok::<_, diffcore::DiffError>(c)
        },
        std::slice::from_ref(&x),
        &GradCheck::default(),
    )
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);

    let bad = GradCheck {
        eps: 1e-2,
        ..GradCheck::default()
    };
    let res: diffcore::Result<_> = finite_diff_check(|g, v| g.sum(v[0]), &[x], &bad);
    assert!(res.is_err());
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, &[700, 6], -1.0, 1.0);
    let w = random(&mut rng, &[6, 4], -1.0, 1.0);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.leaf(w.clone());
        let y = g.linear(xv, wv, None).unwrap();
        let e = g.elu(y).unwrap();
        let l = g.mean(e).unwrap();
        g.backward(l).unwrap().wrt(wv)
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        vals in proptest::collection::vec(-40.0f64..40.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2, 3], vals.clone()).unwrap());
        let y = g.softmax_channels(x).unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let xs = g.constant(Tensor::new(vec![2, 2, 3], shifted).unwrap());
        let ys = g.softmax_channels(xs).unwrap();
        for row in g.value(y).data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        prop_assert!(g.value(y).max_abs_diff(g.value(ys)) < 1e-9);
    }

    #[test]
    fn bilinear_exact_on_nodes_and_linear_between(
        vals in proptest::collection::vec(-1.0f64..1.0, 12),
        x in 0usize..3, y in 0usize..2, frac in 0.0f64..1.0,
    ) {
        let mut g = Graph::new();
        let src = g.constant(Tensor::new(vec![3, 4, 1], vals.clone()).unwrap());
        let node = g.constant(Tensor::new(vec![1, 2], vec![x as f64, y as f64]).unwrap());
        let (v, _) = g.bilinear_sample(src, node, SampleMode::Full, 0.0).unwrap();
        prop_assert_eq!(g.value(v).item(), vals[y * 4 + x]);

        let between = g.constant(
            Tensor::new(vec![1, 2], vec![x as f64 + frac, y as f64]).unwrap(),
        );
        let (v, _) = g.bilinear_sample(src, between, SampleMode::Full, 0.0).unwrap();
        let want = (1.0 - frac) * vals[y * 4 + x] + frac * vals[y * 4 + x + 1];
        prop_assert!((g.value(v).item() - want).abs() < 1e-12);
    }

    #[test]
    fn unused_leaf_gets_exact_zero(vals in proptest::collection::vec(-5.0f64..5.0, 4)) {
        let mut g = Graph::new();
        let used = g.leaf(Tensor::new(vec![4], vals.clone()).unwrap());
        let unused = g.leaf(Tensor::new(vec![4], vals).unwrap());
        let e = g.exp(used).unwrap();
        let l = g.sum(e).unwrap();
        let grads = g.backward(l).unwrap();
        prop_assert!(grads.wrt(unused).data().iter().all(|&v| v == 0.0));
    }
}
