use mtau_tensor::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-1.0..1.0))).unwrap()
}

/// Random values with magnitude in [0.05, 1], so probes stay off ReLU/maxpool kinks.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .unwrap()
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
    let (n, cin, h, w) = x.dims4().unwrap();
    let (cout, _, kh, kw) = k.dims4().unwrap();
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (w + 2 * p - kw) / s + 1;
    Tensor::from_fn(&[n, cout, oh, ow], |flat| {
        let xo = flat % ow;
        let y = (flat / ow) % oh;
        let co = (flat / (ow * oh)) % cout;
        let bi = flat / (ow * oh * cout);
        let mut acc = b.data()[co];
        for ci in 0..cin {
            for dy in 0..kh {
                for dx in 0..kw {
                    let iy = (y * s + dy) as isize - p as isize;
                    let ix = (xo * s + dx) as isize - p as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        acc += x.data()[((bi * cin + ci) * h + iy as usize) * w + ix as usize]
                            * k.data()[((co * cin + ci) * kh + dy) * kw + dx];
                    }
                }
            }
        }
        acc
    })
    .unwrap()
}

fn conv_layer(stride: usize, padding: usize) -> impl Differentiable {
    FnLayer::new(
        move |a: &[Tensor<f64>]| Ok(conv2d_forward(&a[0], &a[1], &a[2], stride, padding)?.0),
        move |a: &[Tensor<f64>], g: &Tensor<f64>| {
            let (_, ctx) = conv2d_forward(&a[0], &a[1], &a[2], stride, padding)?;
            let mut grads = conv2d_backward(&ctx, g)?;
            Ok(vec![grads.input_grad.clone(), grads.take("weight").unwrap(), grads.take("bias").unwrap()])
        },
    )
}

#[test]
fn conv2d_random_case_matches_naive_loops() {
    let x = random::<f64>(&[2, 3, 8, 8], 1);
    let k = random::<f64>(&[4, 3, 3, 3], 2);
    let b = random::<f64>(&[4], 3);
    let (y, _) = conv2d_forward(&x, &k, &b, 1, 1).unwrap();
    assert!(y.max_abs_diff(&naive_conv(&x, &k, &b, 1, 1)).unwrap() < 1e-12);
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for (stride, padding) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let args = vec![random(&[2, 3, 6, 6], 10), random(&[4, 3, 3, 3], 11), random(&[4], 12)];
        let report = grad_check(&conv_layer(stride, padding), &args, GradCheckConfig::default()).unwrap();
        assert!(report.passes(1e-6), "stride {stride} padding {padding}: {report:?}");
    }
}

#[test]
fn pointwise_conv_gradient_is_essentially_exact() {
    let args = vec![random(&[2, 5, 4, 4], 1), random(&[3, 5, 1, 1], 2), random(&[3], 3)];
    let report = grad_check(&conv_layer(1, 0), &args, GradCheckConfig::default()).unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn conv2d_f32_backward_within_1e3_of_f32_finite_differences() {
    // Forward in f32, objective accumulated in f64, step 1e-3.
    let x = random::<f32>(&[1, 2, 5, 5], 21);
    let k = random::<f32>(&[2, 2, 3, 3], 22);
    let b = random::<f32>(&[2], 23);
    let (y, ctx) = conv2d_forward(&x, &k, &b, 1, 1).unwrap();
    let proj = random::<f32>(y.shape(), 24);
    let mut grads = conv2d_backward(&ctx, &proj).unwrap();
    let analytic = [grads.input_grad.clone(), grads.take("weight").unwrap(), grads.take("bias").unwrap()];
    let objective = |args: &[Tensor<f32>]| {
        let (y, _) = conv2d_forward(&args[0], &args[1], &args[2], 1, 1).unwrap();
        y.dot_f64(&proj).unwrap()
    };
    let mut args = vec![x, k, b];
    let h = 1e-3f32;
    let mut worst = 0.0f64;
    for ai in 0..3 {
        for ei in 0..args[ai].len() {
            let orig = args[ai].data()[ei];
            args[ai].data_mut()[ei] = orig + h;
            let plus = objective(&args);
            args[ai].data_mut()[ei] = orig - h;
            let minus = objective(&args);
            args[ai].data_mut()[ei] = orig;
            let step = ((orig + h) as f64) - ((orig - h) as f64);
            let numeric = (plus - minus) / step;
            worst = worst.max(relative_error(analytic[ai].data()[ei] as f64, numeric));
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn transposed_conv_equals_transpose_of_conv_matrix() {
    // Build the dense matrix of the stride-2 convolution out_h x out_w -> h x w
    // column by column, then apply its transpose.
    let (cin, cout, h, w) = (3, 2, 3, 4);
    let (oh, ow) = (2 * h, 2 * w);
    let kernel = random::<f64>(&[cin, cout, 2, 2], 5);
    // As a forward conv the kernel maps cout -> cin channels: [cin, cout, 2, 2].
    let zero_bias_in = Tensor::zeros(&[cin]).unwrap();
    let big = cout * oh * ow;
    let small = cin * h * w;
    let mut matrix = vec![0.0; small * big];
    for j in 0..big {
        let mut e = Tensor::<f64>::zeros(&[1, cout, oh, ow]).unwrap();
        e.data_mut()[j] = 1.0;
        let (col, _) = conv2d_forward(&e, &kernel, &zero_bias_in, 2, 0).unwrap();
        for i in 0..small {
            matrix[i * big + j] = col.data()[i];
        }
    }
    let x = random::<f64>(&[1, cin, h, w], 6);
    let want: Vec<f64> = (0..big).map(|j| (0..small).map(|i| matrix[i * big + j] * x.data()[i]).sum()).collect();
    let (y, _) = transposed_conv2d_forward(&x, &kernel, &Tensor::zeros(&[cout]).unwrap(), 2).unwrap();
    assert_eq!(y.shape(), &[1, cout, oh, ow]);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn transposed_conv_gradients_match_finite_differences() {
    let layer = FnLayer::new(
        |a: &[Tensor<f64>]| Ok(transposed_conv2d_forward(&a[0], &a[1], &a[2], 2)?.0),
        |a: &[Tensor<f64>], g: &Tensor<f64>| {
            let (_, ctx) = transposed_conv2d_forward(&a[0], &a[1], &a[2], 2)?;
            let mut grads = transposed_conv2d_backward(&ctx, g)?;
            Ok(vec![grads.input_grad.clone(), grads.take("weight").unwrap(), grads.take("bias").unwrap()])
        },
    );
    let args = vec![random(&[2, 3, 3, 4], 1), random(&[3, 2, 2, 2], 2), random(&[2], 3)];
    let report = grad_check(&layer, &args, GradCheckConfig::default()).unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

fn bn_layer(mode: Mode) -> impl Differentiable {
    let cfg = BatchNormConfig::default();
    let run = move |a: &[Tensor<f64>]| {
        let stats = (Tensor::full(&[a[1].len()], 0.1).unwrap(), Tensor::full(&[a[1].len()], 0.7).unwrap());
        let params = BatchNormParams { gamma: &a[1], beta: &a[2], running_mean: &stats.0, running_var: &stats.1 };
        batchnorm2d_forward(&a[0], params, mode, cfg)
    };
    FnLayer::new(
        move |a: &[Tensor<f64>]| Ok(run(a)?.output),
        move |a: &[Tensor<f64>], g: &Tensor<f64>| {
            let out = run(a)?;
            let mut grads = batchnorm2d_backward(&out.ctx, g)?;
            Ok(vec![grads.input_grad.clone(), grads.take("gamma").unwrap(), grads.take("beta").unwrap()])
        },
    )
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    for mode in [Mode::Train, Mode::Infer] {
        let args = vec![random(&[3, 2, 3, 3], 31), random(&[2], 32), random(&[2], 33)];
        let report = grad_check(&bn_layer(mode), &args, GradCheckConfig::default()).unwrap();
        assert!(report.passes(1e-6), "{mode:?}: {report:?}");
    }
}

#[test]
fn activation_gradients_match_finite_differences() {
    let relu_layer = FnLayer::new(
        |a: &[Tensor<f64>]| Ok(relu(&a[0])),
        |a: &[Tensor<f64>], g: &Tensor<f64>| Ok(vec![relu_backward(&relu(&a[0]), g)?]),
    );
    let sigmoid_layer = FnLayer::new(
        |a: &[Tensor<f64>]| Ok(sigmoid(&a[0])),
        |a: &[Tensor<f64>], g: &Tensor<f64>| Ok(vec![sigmoid_backward(&sigmoid(&a[0]), g)?]),
    );
    let probe = vec![away_from_zero(&[2, 3, 4, 4], 41).scale(4.0)];
    for (name, report) in [
        ("relu", grad_check(&relu_layer, &probe, GradCheckConfig::default()).unwrap()),
        ("sigmoid", grad_check(&sigmoid_layer, &probe, GradCheckConfig::default()).unwrap()),
    ] {
        assert!(report.passes(1e-6), "{name}: {report:?}");
    }
}

#[test]
fn pooling_and_upsampling_gradients_match_finite_differences() {
    let pool = FnLayer::new(
        |a: &[Tensor<f64>]| Ok(maxpool2d(&a[0])?.0),
        |a: &[Tensor<f64>], g: &Tensor<f64>| Ok(vec![maxpool2d_backward(&maxpool2d(&a[0])?.1, g)?]),
    );
    let up = FnLayer::new(
        |a: &[Tensor<f64>]| upsample2x(&a[0]),
        |_: &[Tensor<f64>], g: &Tensor<f64>| Ok(vec![upsample2x_backward(g)?]),
    );
    let probe = vec![random(&[2, 2, 6, 4], 51)];
    assert!(grad_check(&pool, &probe, GradCheckConfig::default()).unwrap().passes(1e-6));
    assert!(grad_check(&up, &probe, GradCheckConfig::default()).unwrap().passes(1e-6));
}

#[test]
fn gate_product_and_channel_concat_gradients() {
    let layer = FnLayer::new(
        |a: &[Tensor<f64>]| concat_channels(&scale_by_map(&a[0], &a[1])?, &a[0]),
        |a: &[Tensor<f64>], g: &Tensor<f64>| {
            let (g_scaled, g_skip) = split_channels(g, a[0].shape()[1])?;
            let (mut dx, da) = scale_by_map_backward(&a[0], &a[1], &g_scaled)?;
            dx.add_assign(&g_skip)?;
            Ok(vec![dx, da])
        },
    );
    let args = vec![random(&[2, 3, 2, 2], 61), random(&[2, 1, 2, 2], 62)];
    assert!(grad_check(&layer, &args, GradCheckConfig::default()).unwrap().passes(1e-6));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_shape_follows_floor_formula(
        h in 3usize..12, w in 3usize..12, k in 1usize..4, stride in 1usize..4, padding in 0usize..3, seed in 0u64..1000,
    ) {
        let x = random::<f32>(&[1, 2, h, w], seed);
        let kernel = random::<f32>(&[3, 2, k, k], seed + 1);
        let (y, _) = conv2d_forward(&x, &kernel, &Tensor::zeros(&[3]).unwrap(), stride, padding).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, (h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1]);
    }

    #[test]
    fn conv_is_linear_without_bias(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
        let x = random::<f64>(&[2, 2, 5, 5], seed);
        let y = random::<f64>(&[2, 2, 5, 5], seed + 1);
        let k = random::<f64>(&[3, 2, 3, 3], seed + 2);
        let zero = Tensor::zeros(&[3]).unwrap();
        let mixed = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d_forward(&mixed, &k, &zero, 1, 1).unwrap().0;
        let rhs = conv2d_forward(&x, &k, &zero, 1, 1).unwrap().0.scale(a)
            .add(&conv2d_forward(&y, &k, &zero, 1, 1).unwrap().0.scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward(stride in 1usize..3, padding in 0usize..2, seed in 0u64..1000) {
        let x = random::<f64>(&[2, 3, 6, 7], seed);
        let k = random::<f64>(&[2, 3, 3, 3], seed + 1);
        let (y, ctx) = conv2d_forward(&x, &k, &Tensor::zeros(&[2]).unwrap(), stride, padding).unwrap();
        let u = random::<f64>(y.shape(), seed + 2);
        let lhs = y.dot_f64(&u).unwrap();
        let rhs = x.dot_f64(&conv2d_backward(&ctx, &u).unwrap().input_grad).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn activations_stay_in_range(seed in 0u64..1000, scale in 0.1f32..100.0) {
        let x = random::<f32>(&[64], seed).scale(scale);
        prop_assert!(relu(&x).data().iter().all(|&v| v >= 0.0));
        prop_assert!(sigmoid(&x).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn maxpool_backward_conserves_mass(seed in 0u64..1000) {
        let x = random::<f64>(&[1, 2, 4, 6], seed);
        let (y, idx) = maxpool2d(&x).unwrap();
        let g = random::<f64>(y.shape(), seed + 7);
        let dx = maxpool2d_backward(&idx, &g).unwrap();
        prop_assert!((dx.sum_f64() - g.sum_f64()).abs() < 1e-12);
    }
}
