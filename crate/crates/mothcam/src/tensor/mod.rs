//! Dense f32 tensor math: the forward and backward kernels the classifiers
//! are built from.
//!
//! Conventions used throughout the crate:
//! - row-major storage, channels-first (`[C, H, W]`) for image-like tensors;
//! - 32-bit floats everywhere;
//! - no implicit broadcasting — shape mismatches are hard errors;
//! - every operation returns finite values; NaN/Inf is an error state.

mod grad;

pub use grad::{
    activation_backward, batchnorm_backward, batchnorm_train_backward, batchnorm_train_forward,
    conv2d_backward, dense_backward, pool2d_backward, BnBatchCache,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("{context}: {msg}")]
    Invalid { context: &'static str, msg: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err(context: &'static str, expected: impl ToString, got: impl ToString) -> TensorError {
    TensorError::ShapeMismatch {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

/// N-dimensional array of f32 values with row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that the element count matches the shape
    /// and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid {
                context: "Tensor::new",
                msg: format!("zero dimension in shape {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("{expected} elements for shape {shape:?}"),
                data.len(),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor { shape, data })
    }

    /// Same as [`Tensor::new`] but skips the finiteness scan. Only for values
    /// already known finite (e.g. outputs of total functions on finite input).
    pub(crate) fn from_finite(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", format!("{shape:?}"), self.data.len()));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn dims3(&self, context: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err(context, "[C, H, W]", format!("{:?}", self.shape))),
        }
    }

    /// Concatenates tensors along axis 0. Trailing dimensions must agree.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            context: "concat",
            msg: "no inputs".into(),
        })?;
        let tail = &first.shape[1..];
        let mut axis0 = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(shape_err(
                    "concat",
                    format!("[_, {tail:?}]"),
                    format!("{:?}", p.shape),
                ));
            }
            axis0 += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![axis0];
        shape.extend_from_slice(tail);
        Ok(Tensor { shape, data })
    }

    /// Splits along axis 0 into chunks of the given leading sizes.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let total: usize = sizes.iter().sum();
        if total != self.shape[0] {
            return Err(shape_err("split", self.shape[0], total));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &s in sizes {
            let mut shape = vec![s];
            shape.extend_from_slice(&self.shape[1..]);
            out.push(Tensor {
                shape,
                data: self.data[offset * stride..(offset + s) * stride].to_vec(),
            });
            offset += s;
        }
        Ok(out)
    }

    fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

/// Zero-padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1` before striding.
    Valid,
    /// Zero padding so that the output spatial size is `ceil(input / stride)`.
    /// When the total padding is odd the extra pixel goes on the bottom/right.
    Same,
}

/// Static description of a 2-D convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    /// `groups == in_channels` selects a depthwise convolution.
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output size and leading (top/left) padding along one spatial axis.
    pub(crate) fn out_dim(&self, input: usize, kernel: usize) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Valid => {
                if input < kernel {
                    return Err(TensorError::Invalid {
                        context: "conv2d",
                        msg: format!("input {input} smaller than kernel {kernel} (valid padding)"),
                    });
                }
                Ok(((input - kernel) / self.stride + 1, 0))
            }
            Padding::Same => {
                let out = input.div_ceil(self.stride);
                let needed = ((out - 1) * self.stride + kernel).saturating_sub(input);
                Ok((out, needed / 2))
            }
        }
    }
}

/// Pooling reduction applied per window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Pointwise / row-wise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Relu6,
    /// Applied over the last axis; output rows sum to 1.
    Softmax,
}

/// 2-D cross-correlation with bias.
///
/// `input` is `[C_in, H, W]`, `weights` `[C_out, C_in/groups, kh, kw]`,
/// `bias` `[C_out]`. Output is `[C_out, H', W']` per the padding rule.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3("conv2d input")?;
    let [c_out, c_in_g, kh, kw] = *weights.shape() else {
        return Err(shape_err(
            "conv2d weights",
            "[C_out, C_in/groups, kh, kw]",
            format!("{:?}", weights.shape()),
        ));
    };
    if kh != spec.kernel_h || kw != spec.kernel_w {
        return Err(shape_err(
            "conv2d weights",
            format!("kernel {}x{}", spec.kernel_h, spec.kernel_w),
            format!("kernel {kh}x{kw}"),
        ));
    }
    let g = spec.groups;
    if g == 0 || c_in % g != 0 || c_out % g != 0 || c_in_g != c_in / g {
        return Err(shape_err(
            "conv2d groups",
            format!("{c_in} input channels divisible into {g} groups of {c_in_g}"),
            format!("[{c_out}, {c_in_g}, ..] weights"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(shape_err("conv2d bias", c_out, format!("{:?}", bias.shape())));
    }

    let (oh, pad_t) = spec.out_dim(h, kh)?;
    let (ow, pad_l) = spec.out_dim(w, kw)?;
    let co_per_g = c_out / g;
    let ci_per_g = c_in / g;

    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0f32; c_out * oh * ow];
    for oc in 0..c_out {
        let group = oc / co_per_g;
        let b = bias.data()[oc];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for icr in 0..ci_per_g {
                    let ic = group * ci_per_g + icr;
                    let xc = &x[ic * h * w..(ic + 1) * h * w];
                    let wc = &wt[((oc * ci_per_g + icr) * kh) * kw..];
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - pad_t as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xc[iy as usize * w..(iy as usize + 1) * w];
                        let wrow = &wc[ky * kw..(ky + 1) * kw];
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - pad_l as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += row[ix as usize] * wrow[kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::from_finite(vec![c_out, oh, ow], out).check_finite("conv2d")
}

/// Window reduction over the spatial axes; output size uses floor division.
pub fn pool2d(input: &Tensor, window: usize, stride: usize, mode: PoolMode) -> Result<Tensor> {
    let (c, h, w) = input.dims3("pool2d input")?;
    if window == 0 || stride == 0 {
        return Err(TensorError::Invalid {
            context: "pool2d",
            msg: "window and stride must be positive".into(),
        });
    }
    if window > h || window > w {
        return Err(TensorError::Invalid {
            context: "pool2d",
            msg: format!("window {window} larger than input {h}x{w}"),
        });
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = vec![0f32; c * oh * ow];
    let norm = 1.0 / (window * window) as f32;
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = match mode {
                    PoolMode::Avg => 0.0,
                    PoolMode::Max => f32::NEG_INFINITY,
                };
                for ky in 0..window {
                    let row = &xc[(oy * stride + ky) * w..];
                    for kx in 0..window {
                        let v = row[ox * stride + kx];
                        match mode {
                            PoolMode::Avg => acc += v,
                            PoolMode::Max => acc = acc.max(v),
                        }
                    }
                }
                if mode == PoolMode::Avg {
                    acc *= norm;
                }
                out[(ch * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(Tensor::from_finite(vec![c, oh, ow], out))
}

/// Pointwise nonlinearity; softmax normalizes each row of the last axis.
pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => {
            let data = input.data().iter().map(|&v| v.max(0.0)).collect();
            Tensor::from_finite(input.shape.clone(), data)
        }
        Activation::Relu6 => {
            let data = input.data().iter().map(|&v| v.clamp(0.0, 6.0)).collect();
            Tensor::from_finite(input.shape.clone(), data)
        }
        Activation::Softmax => {
            let row = *input.shape.last().expect("non-empty shape");
            let mut data = input.data().to_vec();
            for chunk in data.chunks_mut(row) {
                let max = chunk.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for v in chunk.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in chunk.iter_mut() {
                    *v /= sum;
                }
            }
            Tensor::from_finite(input.shape.clone(), data)
        }
    }
}

/// Affine map: `out = weights · input + bias` with `weights` `[M, N]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n] = *input.shape() else {
        return Err(shape_err("dense input", "[N]", format!("{:?}", input.shape())));
    };
    let [m, wn] = *weights.shape() else {
        return Err(shape_err(
            "dense weights",
            "[M, N]",
            format!("{:?}", weights.shape()),
        ));
    };
    if wn != n {
        return Err(shape_err("dense", format!("[M, {n}]"), format!("[{m}, {wn}]")));
    }
    if bias.shape() != [m] {
        return Err(shape_err("dense bias", m, format!("{:?}", bias.shape())));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(m);
    for row in 0..m {
        let wrow = &weights.data()[row * n..(row + 1) * n];
        let dot: f32 = wrow.iter().zip(x).map(|(a, b)| a * b).sum();
        out.push(dot + bias.data()[row]);
    }
    Tensor::from_finite(vec![m], out).check_finite("dense")
}

/// Per-channel normalization `y = (x - mean)/sqrt(var + eps) * gamma + beta`.
/// Channel axis is axis 0; all parameter tensors are `[C]`.
pub fn batchnorm(
    input: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let c = input.shape()[0];
    for (name, t) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(shape_err("batchnorm", format!("{name} of shape [{c}]"), format!("{:?}", t.shape())));
        }
    }
    if var.data().iter().any(|&v| v < 0.0) {
        return Err(TensorError::Invalid {
            context: "batchnorm",
            msg: "negative variance".into(),
        });
    }
    if eps < 0.0 || (eps == 0.0 && var.data().iter().any(|&v| v == 0.0)) {
        return Err(TensorError::Invalid {
            context: "batchnorm",
            msg: "eps must make var + eps positive".into(),
        });
    }
    let stride: usize = input.shape()[1..].iter().product();
    let mut out = input.data().to_vec();
    for ch in 0..c {
        let scale = gamma.data()[ch] / (var.data()[ch] + eps).sqrt();
        let shift = beta.data()[ch] - mean.data()[ch] * scale;
        for v in &mut out[ch * stride..(ch + 1) * stride] {
            *v = *v * scale + shift;
        }
    }
    Tensor::from_finite(input.shape.clone(), out).check_finite("batchnorm")
}

#[cfg(test)]
mod tests;
