use super::*;
use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reference convolution: direct six-loop definition, no padding tricks.
fn naive_conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Tensor {
    let (c_in, h, w) = input.dims3("oracle").unwrap();
    let [c_out, ci_g, kh, kw] = *weights.shape() else { panic!() };
    let (oh, pad_t) = spec.out_dim(h, kh).unwrap();
    let (ow, pad_l) = spec.out_dim(w, kw).unwrap();
    let co_g = c_out / spec.groups;
    let mut out = vec![0f32; c_out * oh * ow];
    for oc in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.data()[oc];
                for icr in 0..ci_g {
                    let ic = (oc / co_g) * (c_in / spec.groups) + icr;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * spec.stride + ky) as isize - pad_t as isize;
                            let ix = (ox * spec.stride + kx) as isize - pad_l as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += input.data()[(ic * h + iy as usize) * w + ix as usize]
                                * weights.data()[((oc * ci_g + icr) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out).unwrap()
}

#[test]
fn conv_1x1_kernel_scales() {
    let input = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let weights = t(&[1, 1, 1, 1], &[2.0]);
    let bias = t(&[1], &[0.0]);
    let out = conv2d(&input, &weights, &bias, &ConvSpec::new(1, 1, Padding::Valid)).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2]);
    assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn conv_all_ones_sums() {
    let input = t(&[1, 3, 3], &[1.0; 9]);
    let weights = t(&[1, 1, 3, 3], &[1.0; 9]);
    let bias = t(&[1], &[0.0]);
    let out = conv2d(&input, &weights, &bias, &ConvSpec::new(3, 1, Padding::Valid)).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1]);
    assert_eq!(out.data(), &[9.0]);
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = rand_tensor(&mut rng, &[1, 8, 8]);
    let weights = rand_tensor(&mut rng, &[3, 1, 3, 3]);
    let bias = rand_tensor(&mut rng, &[3]);
    for padding in [Padding::Valid, Padding::Same] {
        for stride in [1, 2] {
            let spec = ConvSpec::new(3, stride, padding);
            let got = conv2d(&input, &weights, &bias, &spec).unwrap();
            let want = naive_conv2d(&input, &weights, &bias, &spec);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }
}

#[test]
fn conv_grouped_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input = rand_tensor(&mut rng, &[4, 6, 6]);
    let weights = rand_tensor(&mut rng, &[6, 2, 3, 3]);
    let bias = rand_tensor(&mut rng, &[6]);
    let spec = ConvSpec::new(3, 1, Padding::Same).with_groups(2);
    let got = conv2d(&input, &weights, &bias, &spec).unwrap();
    let want = naive_conv2d(&input, &weights, &bias, &spec);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-6);
    }
}

#[test]
fn depthwise_equals_independent_single_channel_convs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = 3;
    let input = rand_tensor(&mut rng, &[c, 7, 7]);
    let weights = rand_tensor(&mut rng, &[c, 1, 3, 3]);
    let bias = rand_tensor(&mut rng, &[c]);
    let spec = ConvSpec::new(3, 1, Padding::Same).with_groups(c);
    let full = conv2d(&input, &weights, &bias, &spec).unwrap();
    for ch in 0..c {
        let xin = t(&[1, 7, 7], &input.data()[ch * 49..(ch + 1) * 49]);
        let win = t(&[1, 1, 3, 3], &weights.data()[ch * 9..(ch + 1) * 9]);
        let bin = t(&[1], &[bias.data()[ch]]);
        let single = conv2d(&xin, &win, &bin, &ConvSpec::new(3, 1, Padding::Same)).unwrap();
        assert_eq!(&full.data()[ch * 49..(ch + 1) * 49], single.data());
    }
}

#[test]
fn conv_shape_mismatch_is_error() {
    let input = t(&[2, 4, 4], &[0.0; 32]);
    let weights = t(&[1, 3, 3, 3], &[0.0; 27]); // claims 3 input channels
    let bias = t(&[1], &[0.0]);
    let err = conv2d(&input, &weights, &bias, &ConvSpec::new(3, 1, Padding::Valid)).unwrap_err();
    assert!(err.to_string().contains("groups"), "{err}");
}

#[test]
fn conv_and_dense_are_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[2, 5, 5]);
    let y = rand_tensor(&mut rng, &[2, 5, 5]);
    let weights = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let zero_b = Tensor::zeros(vec![3]);
    let spec = ConvSpec::new(3, 1, Padding::Valid);
    let (a, b) = (0.7f32, -1.3f32);
    let mixed_in = Tensor::new(
        vec![2, 5, 5],
        x.data().iter().zip(y.data()).map(|(&p, &q)| a * p + b * q).collect(),
    )
    .unwrap();
    let lhs = conv2d(&mixed_in, &weights, &zero_b, &spec).unwrap();
    let fx = conv2d(&x, &weights, &zero_b, &spec).unwrap();
    let fy = conv2d(&y, &weights, &zero_b, &spec).unwrap();
    for i in 0..lhs.len() {
        assert_abs_diff_eq!(lhs.data()[i], a * fx.data()[i] + b * fy.data()[i], epsilon = 1e-5);
    }

    let dx = rand_tensor(&mut rng, &[6]);
    let dy = rand_tensor(&mut rng, &[6]);
    let dw = rand_tensor(&mut rng, &[4, 6]);
    let dz = Tensor::zeros(vec![4]);
    let mixed = Tensor::new(
        vec![6],
        dx.data().iter().zip(dy.data()).map(|(&p, &q)| a * p + b * q).collect(),
    )
    .unwrap();
    let lhs = dense(&mixed, &dw, &dz).unwrap();
    let fx = dense(&dx, &dw, &dz).unwrap();
    let fy = dense(&dy, &dw, &dz).unwrap();
    for i in 0..4 {
        assert_abs_diff_eq!(lhs.data()[i], a * fx.data()[i] + b * fy.data()[i], epsilon = 1e-5);
    }
}

#[test]
fn pool_avg_and_max() {
    let input = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let avg = pool2d(&input, 2, 2, PoolMode::Avg).unwrap();
    assert_eq!(avg.data(), &[2.5]);
    let max = pool2d(&input, 2, 2, PoolMode::Max).unwrap();
    assert_eq!(max.data(), &[4.0]);
}

#[test]
fn pool_output_shape_uses_floor() {
    let input = Tensor::zeros(vec![1, 52, 52]);
    let out = pool2d(&input, 2, 2, PoolMode::Max).unwrap();
    assert_eq!(out.shape(), &[1, 26, 26]);
}

#[test]
fn pool_window_larger_than_input_is_error() {
    let input = Tensor::zeros(vec![1, 2, 2]);
    assert!(pool2d(&input, 3, 1, PoolMode::Avg).is_err());
}

#[test]
fn activation_examples() {
    let x = t(&[4], &[-1.0, 3.0, 7.0, 0.0]);
    assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 3.0, 7.0, 0.0]);
    assert_eq!(activation(&x, Activation::Relu6).data(), &[0.0, 3.0, 6.0, 0.0]);
    let s = activation(&t(&[2], &[0.0, 0.0]), Activation::Softmax);
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn softmax_is_probability_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = rand_tensor(&mut rng, &[8]);
        let y = activation(&x, Activation::Softmax);
        assert!(y.data().iter().all(|&v| v >= 0.0));
        let sum: f32 = y.data().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
    }
}

#[test]
fn dense_identity_and_bias() {
    let x = t(&[3], &[1.0, -2.0, 3.0]);
    let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let zero = Tensor::zeros(vec![3]);
    assert_eq!(dense(&x, &eye, &zero).unwrap().data(), x.data());

    let w0 = Tensor::zeros(vec![2, 3]);
    let b = t(&[2], &[0.5, -0.5]);
    assert_eq!(dense(&x, &w0, &b).unwrap().data(), b.data());
}

#[test]
fn dense_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[4]);
    let w = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3]);
    let got = dense(&x, &w, &b).unwrap();
    for row in 0..3 {
        let mut acc = b.data()[row];
        for col in 0..4 {
            acc += w.data()[row * 4 + col] * x.data()[col];
        }
        assert_abs_diff_eq!(got.data()[row], acc, epsilon = 1e-6);
    }
}

#[test]
fn dense_dim_mismatch_is_error() {
    let x = t(&[3], &[0.0; 3]);
    let w = t(&[2, 4], &[0.0; 8]);
    assert!(dense(&x, &w, &Tensor::zeros(vec![2])).is_err());
}

#[test]
fn batchnorm_identity_and_hand_value() {
    let x = t(&[1, 1, 2], &[1.5, -0.5]);
    let out = batchnorm(
        &x,
        &Tensor::zeros(vec![1]),
        &t(&[1], &[1.0]),
        &t(&[1], &[1.0]),
        &Tensor::zeros(vec![1]),
        0.0,
    )
    .unwrap();
    assert_eq!(out.data(), x.data());

    // x=2, mean=1, var=4, gamma=2, beta=1, eps=0 -> (2-1)/2*2+1 = 2
    let x = t(&[1], &[2.0]);
    let out = batchnorm(&x, &t(&[1], &[1.0]), &t(&[1], &[4.0]), &t(&[1], &[2.0]), &t(&[1], &[1.0]), 0.0)
        .unwrap();
    assert_abs_diff_eq!(out.data()[0], 2.0, epsilon = 1e-6);
}

#[test]
fn batchnorm_centered_constant_channel_gives_beta() {
    let x = t(&[2, 2, 2], &[3.0; 8]);
    let out = batchnorm(
        &x,
        &t(&[2], &[3.0, 3.0]),
        &t(&[2], &[1.0, 1.0]),
        &t(&[2], &[5.0, 5.0]),
        &t(&[2], &[-1.0, 2.0]),
        1e-5,
    )
    .unwrap();
    assert!(out.data()[..4].iter().all(|&v| (v + 1.0).abs() < 1e-4));
    assert!(out.data()[4..].iter().all(|&v| (v - 2.0).abs() < 1e-4));
}

#[test]
fn batchnorm_negative_variance_is_error() {
    let x = t(&[1], &[0.0]);
    let err = batchnorm(&x, &t(&[1], &[0.0]), &t(&[1], &[-1.0]), &t(&[1], &[1.0]), &t(&[1], &[0.0]), 1e-5);
    assert!(err.is_err());
}

// ---- gradient checks -----------------------------------------------------
//
// The oracles below re-evaluate each op in f64 (independent of the f32
// kernels) so central differences are not drowned by single-precision noise.

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central-difference check of `d scalar_objective / d param[i]`. The
/// realized step is measured after f32 rounding.
fn check_grads(
    analytic: &Tensor,
    mut eval: impl FnMut(&Tensor) -> f64,
    base: &Tensor,
    h: f32,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        let step = (plus.data()[i] - minus.data()[i]) as f64;
        let numeric = (eval(&plus) - eval(&minus)) / step;
        worst = worst.max(rel_err(analytic.data()[i] as f64, numeric));
    }
    worst
}

/// f64 reference convolution objective: probe-weighted sum of the output.
fn conv_objective_f64(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
    probe: &Tensor,
) -> f64 {
    let (c_in, h, w) = input.dims3("oracle").unwrap();
    let [c_out, ci_g, kh, kw] = *weights.shape() else { panic!() };
    let (oh, pad_t) = spec.out_dim(h, kh).unwrap();
    let (ow, pad_l) = spec.out_dim(w, kw).unwrap();
    let co_g = c_out / spec.groups;
    let mut objective = 0f64;
    for oc in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.data()[oc] as f64;
                for icr in 0..ci_g {
                    let ic = (oc / co_g) * (c_in / spec.groups) + icr;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * spec.stride + ky) as isize - pad_t as isize;
                            let ix = (ox * spec.stride + kx) as isize - pad_l as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += input.data()[(ic * h + iy as usize) * w + ix as usize] as f64
                                * weights.data()[((oc * ci_g + icr) * kh + ky) * kw + kx] as f64;
                        }
                    }
                }
                objective += acc * probe.data()[(oc * oh + oy) * ow + ox] as f64;
            }
        }
    }
    objective
}

fn softmax_objective_f64(input: &Tensor, probe: &Tensor) -> f64 {
    let x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter()
        .zip(probe.data())
        .map(|(e, &p)| e / sum * p as f64)
        .sum()
}

fn bn_train_objective_f64(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32, probe: &Tensor) -> f64 {
    let c = input.shape()[0];
    let stride: usize = input.shape()[1..].iter().product();
    let mut objective = 0f64;
    for ch in 0..c {
        let sl: Vec<f64> = input.data()[ch * stride..(ch + 1) * stride]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let n = stride as f64;
        let mu: f64 = sl.iter().sum::<f64>() / n;
        let var: f64 = sl.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (i, v) in sl.iter().enumerate() {
            let y = gamma.data()[ch] as f64 * (v - mu) * inv + beta.data()[ch] as f64;
            objective += y * probe.data()[ch * stride + i] as f64;
        }
    }
    objective
}

#[test]
fn relu_gradient_examples() {
    let x = t(&[2], &[3.0, -3.0]);
    let g = t(&[2], &[1.0, 1.0]);
    let gx = activation_backward(Activation::Relu, &x, &g).unwrap();
    assert_eq!(gx.data(), &[1.0, 0.0]);
}

#[test]
fn avg_pool_gradient_distributes_uniformly() {
    let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let g = t(&[1, 1, 1], &[8.0]);
    let gx = pool2d_backward(&x, 2, 2, PoolMode::Avg, &g).unwrap();
    assert_eq!(gx.data(), &[2.0, 2.0, 2.0, 2.0]);
}

#[test]
fn dense_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[5]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[4]);
    let probe = rand_tensor(&mut rng, &[4]);
    let (_, gw, _) = dense_backward(&x, &w, &probe).unwrap();
    let objective = |wp: &Tensor| -> f64 {
        let mut acc = 0f64;
        for row in 0..4 {
            let mut y = b.data()[row] as f64;
            for col in 0..5 {
                y += wp.data()[row * 5 + col] as f64 * x.data()[col] as f64;
            }
            acc += y * probe.data()[row] as f64;
        }
        acc
    };
    let worst = check_grads(&gw, objective, &w, 1e-3);
    assert!(worst < 1e-3, "relative error {worst}");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (padding, stride, groups) in [
        (Padding::Valid, 1, 1),
        (Padding::Same, 2, 1),
        (Padding::Same, 1, 2),
    ] {
        let input = rand_tensor(&mut rng, &[2, 4, 4]);
        let weights = rand_tensor(&mut rng, &[2, 2 / groups, 3, 3]);
        let bias = rand_tensor(&mut rng, &[2]);
        let spec = ConvSpec::new(3, stride, padding).with_groups(groups);
        let out = conv2d(&input, &weights, &bias, &spec).unwrap();
        let probe = rand_tensor(&mut rng, out.shape());
        let (gx, gw, gb) = conv2d_backward(&input, &weights, &spec, &probe).unwrap();

        let w1 = check_grads(&gx, |xp| conv_objective_f64(xp, &weights, &bias, &spec, &probe), &input, 1e-3);
        let w2 = check_grads(&gw, |wp| conv_objective_f64(&input, wp, &bias, &spec, &probe), &weights, 1e-3);
        let w3 = check_grads(&gb, |bp| conv_objective_f64(&input, &weights, bp, &spec, &probe), &bias, 1e-3);
        assert!(w1.max(w2).max(w3) < 1e-3, "{padding:?} s{stride} g{groups}: {w1} {w2} {w3}");
    }
}

#[test]
fn pool_max_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let input = rand_tensor(&mut rng, &[1, 4, 4]);
    let probe = rand_tensor(&mut rng, &[1, 2, 2]);
    let gx = pool2d_backward(&input, 2, 2, PoolMode::Max, &probe).unwrap();
    let objective = |xp: &Tensor| -> f64 {
        let mut acc = 0f64;
        for oy in 0..2 {
            for ox in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..2 {
                    for kx in 0..2 {
                        best = best.max(xp.data()[(oy * 2 + ky) * 4 + ox * 2 + kx] as f64);
                    }
                }
                acc += best * probe.data()[oy * 2 + ox] as f64;
            }
        }
        acc
    };
    // small h keeps perturbations from switching the argmax
    let worst = check_grads(&gx, objective, &input, 1e-4);
    assert!(worst < 1e-3, "relative error {worst}");
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let input = rand_tensor(&mut rng, &[6]);
    let probe = rand_tensor(&mut rng, &[6]);
    let gx = activation_backward(Activation::Softmax, &input, &probe).unwrap();
    let worst = check_grads(&gx, |xp| softmax_objective_f64(xp, &probe), &input, 1e-3);
    assert!(worst < 1e-3, "relative error {worst}");
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let input = rand_tensor(&mut rng, &[2, 3, 3]);
    let gamma = rand_tensor(&mut rng, &[2]);
    let beta = rand_tensor(&mut rng, &[2]);
    let probe = rand_tensor(&mut rng, &[2, 3, 3]);
    let eps = 1e-3;

    // training form: statistics depend on the input
    let (_, cache) = batchnorm_train_forward(&input, &gamma, &beta, eps).unwrap();
    let (gx, dgamma, dbeta) = batchnorm_train_backward(&cache, &gamma, &probe).unwrap();
    let w1 = check_grads(&gx, |xp| bn_train_objective_f64(xp, &gamma, &beta, eps, &probe), &input, 1e-3);
    let w2 = check_grads(&dgamma, |gp| bn_train_objective_f64(&input, gp, &beta, eps, &probe), &gamma, 1e-3);
    let w3 = check_grads(&dbeta, |bp| bn_train_objective_f64(&input, &gamma, bp, eps, &probe), &beta, 1e-3);
    assert!(w1.max(w2).max(w3) < 1e-3, "train-form errors {w1} {w2} {w3}");

    // inference form: fixed statistics
    let mean = rand_tensor(&mut rng, &[2]);
    let var = t(&[2], &[0.9, 1.7]);
    let (gx, _, _) = batchnorm_backward(&input, &mean, &var, &gamma, eps, &probe).unwrap();
    let objective = |xp: &Tensor| -> f64 {
        let mut acc = 0f64;
        let stride = 9;
        for ch in 0..2 {
            let inv = 1.0 / ((var.data()[ch] + eps) as f64).sqrt();
            for i in ch * stride..(ch + 1) * stride {
                let y = gamma.data()[ch] as f64 * (xp.data()[i] as f64 - mean.data()[ch] as f64) * inv
                    + beta.data()[ch] as f64;
                acc += y * probe.data()[i] as f64;
            }
        }
        acc
    };
    let w4 = check_grads(&gx, objective, &input, 1e-3);
    assert!(w4 < 1e-3, "inference-form error {w4}");
}

#[test]
fn concat_split_roundtrip() {
    let a = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
    let cat = Tensor::concat(&[&a, &b]).unwrap();
    assert_eq!(cat.shape(), &[3, 2, 2]);
    let parts = cat.split(&[1, 2]).unwrap();
    assert_eq!(parts[0], a);
    assert_eq!(parts[1], b);
}

#[test]
fn non_finite_values_are_rejected() {
    assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
    assert!(Tensor::new(vec![2], vec![1.0, f32::INFINITY]).is_err());
}
