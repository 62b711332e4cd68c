//! Analytic gradients for the forward kernels in this module.
//!
//! Each backward function takes the tensors the forward pass consumed (the
//! "recorded context") plus the upstream gradient, and returns gradients in
//! the order (input, weights, bias) where applicable. Shape checking mirrors
//! the forward functions.

use super::{
    shape_err, Activation, ConvSpec, PoolMode, Result, Tensor, TensorError,
};

/// Gradients of [`super::conv2d`] w.r.t. input, weights and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, h, w) = input.dims3("conv2d_backward input")?;
    let [c_out, ci_per_g, kh, kw] = *weights.shape() else {
        return Err(shape_err(
            "conv2d_backward weights",
            "[C_out, C_in/groups, kh, kw]",
            format!("{:?}", weights.shape()),
        ));
    };
    let (oh, pad_t) = spec.out_dim(h, kh)?;
    let (ow, pad_l) = spec.out_dim(w, kw)?;
    if grad_out.shape() != [c_out, oh, ow] {
        return Err(shape_err(
            "conv2d_backward grad",
            format!("[{c_out}, {oh}, {ow}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let g = spec.groups;
    let co_per_g = c_out / g;

    let x = input.data();
    let wt = weights.data();
    let gy = grad_out.data();
    let mut gx = vec![0f32; x.len()];
    let mut gw = vec![0f32; wt.len()];
    let mut gb = vec![0f32; c_out];

    for oc in 0..c_out {
        let group = oc / co_per_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let up = gy[(oc * oh + oy) * ow + ox];
                if up == 0.0 {
                    continue;
                }
                gb[oc] += up;
                for icr in 0..ci_per_g {
                    let ic = group * ci_per_g + icr;
                    let xoff = ic * h * w;
                    let woff = ((oc * ci_per_g + icr) * kh) * kw;
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - pad_t as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xoff + iy as usize * w;
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - pad_l as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = row + ix as usize;
                            let wi = woff + ky * kw + kx;
                            gw[wi] += up * x[xi];
                            gx[xi] += up * wt[wi];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_finite(vec![c_in, h, w], gx),
        Tensor::from_finite(vec![c_out, ci_per_g, kh, kw], gw),
        Tensor::from_finite(vec![c_out], gb),
    ))
}

/// Gradient of [`super::pool2d`] w.r.t. its input.
///
/// Average pooling distributes the upstream gradient uniformly over the
/// window; max pooling routes it to the first maximal element (ties broken
/// by scan order, deterministic).
pub fn pool2d_backward(
    input: &Tensor,
    window: usize,
    stride: usize,
    mode: PoolMode,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = input.dims3("pool2d_backward input")?;
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    if grad_out.shape() != [c, oh, ow] {
        return Err(shape_err(
            "pool2d_backward grad",
            format!("[{c}, {oh}, {ow}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let x = input.data();
    let gy = grad_out.data();
    let mut gx = vec![0f32; x.len()];
    let norm = 1.0 / (window * window) as f32;
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let up = gy[(ch * oh + oy) * ow + ox];
                match mode {
                    PoolMode::Avg => {
                        for ky in 0..window {
                            for kx in 0..window {
                                gx[base + (oy * stride + ky) * w + ox * stride + kx] += up * norm;
                            }
                        }
                    }
                    PoolMode::Max => {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0;
                        for ky in 0..window {
                            for kx in 0..window {
                                let i = base + (oy * stride + ky) * w + ox * stride + kx;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                        gx[best_i] += up;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_finite(vec![c, h, w], gx))
}

/// Gradient of [`super::activation`] w.r.t. its input.
///
/// For ReLU family the subgradient at the kink takes the inactive branch
/// (zero at exactly 0 / 6). Softmax recomputes its output internally.
pub fn activation_backward(kind: Activation, input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != input.shape() {
        return Err(shape_err(
            "activation_backward",
            format!("{:?}", input.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let data = match kind {
        Activation::Relu => input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        Activation::Relu6 => input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > 0.0 && x < 6.0 { g } else { 0.0 })
            .collect(),
        Activation::Softmax => {
            let y = super::activation(input, Activation::Softmax);
            let row = *input.shape().last().expect("non-empty shape");
            let mut out = vec![0f32; input.len()];
            for (r, (yc, gc)) in y.data().chunks(row).zip(grad_out.data().chunks(row)).enumerate() {
                let dot: f32 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                for i in 0..row {
                    out[r * row + i] = yc[i] * (gc[i] - dot);
                }
            }
            out
        }
    };
    Ok(Tensor::from_finite(input.shape().to_vec(), data))
}

/// Gradients of [`super::dense`] w.r.t. input, weights and bias.
pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n] = *input.shape() else {
        return Err(shape_err("dense_backward input", "[N]", format!("{:?}", input.shape())));
    };
    let [m, wn] = *weights.shape() else {
        return Err(shape_err(
            "dense_backward weights",
            "[M, N]",
            format!("{:?}", weights.shape()),
        ));
    };
    if wn != n || grad_out.shape() != [m] {
        return Err(shape_err(
            "dense_backward",
            format!("weights [M, {n}], grad [M]"),
            format!("weights [{m}, {wn}], grad {:?}", grad_out.shape()),
        ));
    }
    let x = input.data();
    let gy = grad_out.data();
    let mut gx = vec![0f32; n];
    let mut gw = vec![0f32; m * n];
    for row in 0..m {
        let up = gy[row];
        let wrow = &weights.data()[row * n..(row + 1) * n];
        for i in 0..n {
            gx[i] += up * wrow[i];
            gw[row * n + i] = up * x[i];
        }
    }
    Ok((
        Tensor::from_finite(vec![n], gx),
        Tensor::from_finite(vec![m, n], gw),
        Tensor::from_finite(vec![m], gy.to_vec()),
    ))
}

/// Gradients of [`super::batchnorm`] with fixed statistics (inference form):
/// mean and var are constants, so the input gradient is a per-channel scale.
/// Returns (grad_input, grad_gamma, grad_beta).
pub fn batchnorm_backward(
    input: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    eps: f32,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if grad_out.shape() != input.shape() {
        return Err(shape_err(
            "batchnorm_backward",
            format!("{:?}", input.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let c = input.shape()[0];
    let stride: usize = input.shape()[1..].iter().product();
    let x = input.data();
    let gy = grad_out.data();
    let mut gx = vec![0f32; x.len()];
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];
    for ch in 0..c {
        let inv_std = 1.0 / (var.data()[ch] + eps).sqrt();
        let mu = mean.data()[ch];
        let scale = gamma.data()[ch] * inv_std;
        for i in ch * stride..(ch + 1) * stride {
            let xhat = (x[i] - mu) * inv_std;
            dgamma[ch] += gy[i] * xhat;
            dbeta[ch] += gy[i];
            gx[i] = gy[i] * scale;
        }
    }
    Ok((
        Tensor::from_finite(input.shape().to_vec(), gx),
        Tensor::from_finite(vec![c], dgamma),
        Tensor::from_finite(vec![c], dbeta),
    ))
}

/// Values cached by [`batchnorm_train_forward`] for the backward pass and
/// for updating running statistics.
#[derive(Debug, Clone)]
pub struct BnBatchCache {
    pub normalized: Tensor,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Training-mode batch normalization over the non-channel axes of one
/// sample: statistics are computed per channel from the input itself.
pub fn batchnorm_train_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, BnBatchCache)> {
    let c = input.shape()[0];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "batchnorm_train",
            format!("gamma/beta of shape [{c}]"),
            format!("{:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    let stride: usize = input.shape()[1..].iter().product();
    let x = input.data();
    let n = stride as f32;
    let mut out = vec![0f32; x.len()];
    let mut xhat = vec![0f32; x.len()];
    let mut mean = vec![0f32; c];
    let mut var = vec![0f32; c];
    let mut inv_std = vec![0f32; c];
    for ch in 0..c {
        let sl = &x[ch * stride..(ch + 1) * stride];
        let mu: f32 = sl.iter().sum::<f32>() / n;
        let v: f32 = sl.iter().map(|&a| (a - mu) * (a - mu)).sum::<f32>() / n;
        let is = 1.0 / (v + eps).sqrt();
        mean[ch] = mu;
        var[ch] = v;
        inv_std[ch] = is;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for (i, &a) in sl.iter().enumerate() {
            let h = (a - mu) * is;
            xhat[ch * stride + i] = h;
            out[ch * stride + i] = g * h + b;
        }
    }
    let out = Tensor::new(input.shape().to_vec(), out)?;
    Ok((
        out,
        BnBatchCache {
            normalized: Tensor::from_finite(input.shape().to_vec(), xhat),
            mean,
            var,
            inv_std,
        },
    ))
}

/// Backward pass matching [`batchnorm_train_forward`]. The gradient accounts
/// for the dependence of the batch statistics on the input.
pub fn batchnorm_train_backward(
    cache: &BnBatchCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let shape = cache.normalized.shape().to_vec();
    if grad_out.shape() != shape {
        return Err(shape_err(
            "batchnorm_train_backward",
            format!("{shape:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let c = shape[0];
    let stride: usize = shape[1..].iter().product();
    let n = stride as f32;
    let xhat = cache.normalized.data();
    let gy = grad_out.data();
    let mut gx = vec![0f32; gy.len()];
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];
    for ch in 0..c {
        let range = ch * stride..(ch + 1) * stride;
        let mut sum_gy = 0f32;
        let mut sum_gy_xhat = 0f32;
        for i in range.clone() {
            sum_gy += gy[i];
            sum_gy_xhat += gy[i] * xhat[i];
        }
        dbeta[ch] = sum_gy;
        dgamma[ch] = sum_gy_xhat;
        let scale = gamma.data()[ch] * cache.inv_std[ch] / n;
        for i in range {
            gx[i] = scale * (n * gy[i] - sum_gy - xhat[i] * sum_gy_xhat);
        }
    }
    Ok((
        Tensor::from_finite(shape, gx),
        Tensor::from_finite(vec![c], dgamma),
        Tensor::from_finite(vec![c], dbeta),
    ))
}

impl TensorError {
    /// Error for a backward call whose forward context was never recorded.
    pub fn missing_context(layer: &str) -> TensorError {
        TensorError::Invalid {
            context: "backward",
            msg: format!("no recorded forward context for layer '{layer}'"),
        }
    }
}
