//! Builders for the three candidate classifiers.
//!
//! All three take grayscale `[1, S, S]` tiles and end in a two-way softmax.
//! Initialization is He-uniform for conv/dense weights, zero biases, and
//! identity batchnorm, drawn from a seedable RNG so builds are reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ConnectionTable, LayerKind, LayerParams, LayerSpec, ModelError, ModelGraph, Result, INPUT,
};
use crate::tensor::{Activation, ConvSpec, Padding, PoolMode, Tensor};

/// Seed used by the unseeded builder entry points.
pub const DEFAULT_INIT_SEED: u64 = 0x6d6f7468; // "moth"

/// The classic sparse connectivity of the second LeNet convolution: each of
/// the 16 maps reads only a subset of the 6 pooled maps.
const LENET_C3: [&[usize]; 16] = [
    &[0, 1, 2],
    &[1, 2, 3],
    &[2, 3, 4],
    &[3, 4, 5],
    &[4, 5, 0],
    &[5, 0, 1],
    &[0, 1, 2, 3],
    &[1, 2, 3, 4],
    &[2, 3, 4, 5],
    &[3, 4, 5, 0],
    &[4, 5, 0, 1],
    &[5, 0, 1, 2],
    &[0, 1, 3, 4],
    &[1, 2, 4, 5],
    &[0, 2, 3, 5],
    &[0, 1, 2, 3, 4, 5],
];

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-uniform: +-sqrt(6 / fan_in).
    fn conv(&mut self, c_out: usize, c_in_g: usize, kh: usize, kw: usize) -> Vec<Tensor> {
        let fan_in = (c_in_g * kh * kw) as f32;
        let limit = (6.0 / fan_in).sqrt();
        let n = c_out * c_in_g * kh * kw;
        let data = (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect();
        vec![
            Tensor::new(vec![c_out, c_in_g, kh, kw], data).expect("finite init"),
            Tensor::zeros(vec![c_out]),
        ]
    }

    fn dense(&mut self, out_features: usize, in_features: usize) -> Vec<Tensor> {
        let limit = (6.0 / in_features as f32).sqrt();
        let data = (0..out_features * in_features)
            .map(|_| self.rng.gen_range(-limit..limit))
            .collect();
        vec![
            Tensor::new(vec![out_features, in_features], data).expect("finite init"),
            Tensor::zeros(vec![out_features]),
        ]
    }

    /// gamma = 1, beta = 0, running mean = 0, running var = 1.
    fn batchnorm(&mut self, channels: usize) -> Vec<Tensor> {
        vec![
            Tensor::new(vec![channels], vec![1.0; channels]).expect("finite"),
            Tensor::zeros(vec![channels]),
            Tensor::zeros(vec![channels]),
            Tensor::new(vec![channels], vec![1.0; channels]).expect("finite"),
        ]
    }
}

/// Small helper holding the graph under construction plus the running output
/// name, so builders read as a chain of layer additions.
struct GraphBuilder {
    graph: ModelGraph,
    init: Init,
    tip: String,
}

impl GraphBuilder {
    fn new(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Self {
        GraphBuilder {
            graph: ModelGraph::new(input_shape, num_classes),
            init: Init::new(seed),
            tip: INPUT.to_string(),
        }
    }

    fn push(&mut self, spec: LayerSpec, weights: Vec<Tensor>) -> Result<()> {
        self.tip = spec.name.clone();
        self.graph.add_layer(spec, weights)
    }

    fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        connectivity: Option<ConnectionTable>,
    ) -> Result<()> {
        let mut weights = self.init.conv(out_ch, in_ch / spec.groups, spec.kernel_h, spec.kernel_w);
        if let Some(table) = &connectivity {
            table.apply(&mut weights[0]);
        }
        let kind = if spec.groups > 1 && in_ch == spec.groups {
            LayerKind::DepthwiseConv
        } else {
            LayerKind::Conv
        };
        self.push(
            LayerSpec::new(
                name,
                kind,
                LayerParams::Conv { spec, out_channels: out_ch, connectivity },
                vec![self.tip.clone()],
            ),
            weights,
        )
    }

    fn pool(&mut self, name: &str, window: usize, stride: usize, mode: PoolMode) -> Result<()> {
        self.push(
            LayerSpec::new(
                name,
                LayerKind::Pool,
                LayerParams::Pool { window, stride, mode },
                vec![self.tip.clone()],
            ),
            Vec::new(),
        )
    }

    fn activation(&mut self, name: &str, kind: Activation) -> Result<()> {
        self.push(
            LayerSpec::new(
                name,
                LayerKind::Activation,
                LayerParams::Activation { kind },
                vec![self.tip.clone()],
            ),
            Vec::new(),
        )
    }

    fn batchnorm(&mut self, name: &str, channels: usize, eps: f32) -> Result<()> {
        let weights = self.init.batchnorm(channels);
        self.push(
            LayerSpec::new(
                name,
                LayerKind::Batchnorm,
                LayerParams::Batchnorm { eps },
                vec![self.tip.clone()],
            ),
            weights,
        )
    }

    fn dense(&mut self, name: &str, in_features: usize, out_features: usize) -> Result<()> {
        let weights = self.init.dense(out_features, in_features);
        self.push(
            LayerSpec::new(
                name,
                LayerKind::Dense,
                LayerParams::Dense { out_features },
                vec![self.tip.clone()],
            ),
            weights,
        )
    }

    fn dropout(&mut self, name: &str, rate: f32) -> Result<()> {
        self.push(
            LayerSpec::new(
                name,
                LayerKind::Dropout,
                LayerParams::Dropout { rate },
                vec![self.tip.clone()],
            ),
            Vec::new(),
        )
    }

    fn flatten(&mut self, name: &str) -> Result<()> {
        self.push(
            LayerSpec::new(name, LayerKind::Flatten, LayerParams::Flatten, vec![self.tip.clone()]),
            Vec::new(),
        )
    }

    fn residual_add(&mut self, name: &str, a: &str, b: &str) -> Result<()> {
        self.push(
            LayerSpec::new(
                name,
                LayerKind::ResidualAdd,
                LayerParams::ResidualAdd,
                vec![a.to_string(), b.to_string()],
            ),
            Vec::new(),
        )
    }

    fn finish(self) -> Result<ModelGraph> {
        self.graph.validate()?;
        Ok(self.graph)
    }
}

pub fn build_lenet5(input_size: usize, num_classes: usize) -> Result<ModelGraph> {
    build_lenet5_seeded(input_size, num_classes, DEFAULT_INIT_SEED)
}

/// 7-layer LeNet-5 variant: three valid 5x5 convolutions (6, 16, 120 maps,
/// the second with the sparse map connectivity), two average poolings, one
/// fully connected layer and a softmax. ReLU replaces the original tanh.
pub fn build_lenet5_seeded(input_size: usize, num_classes: usize, seed: u64) -> Result<ModelGraph> {
    if input_size < 32 {
        return Err(ModelError::Invalid(format!(
            "LeNet-5 needs input_size >= 32 for its conv/pool chain, got {input_size}"
        )));
    }
    let mut b = GraphBuilder::new([1, input_size, input_size], num_classes, seed);
    let conv5 = || ConvSpec::new(5, 1, Padding::Valid);

    b.conv("c1", 1, 6, conv5(), None)?;
    b.activation("relu1", Activation::Relu)?;
    b.pool("s2", 2, 2, PoolMode::Avg)?;
    b.conv("c3", 6, 16, conv5(), Some(ConnectionTable::new(16, 6, &LENET_C3)))?;
    b.activation("relu3", Activation::Relu)?;
    b.pool("s4", 2, 2, PoolMode::Avg)?;
    b.conv("c5", 16, 120, conv5(), None)?;
    b.activation("relu5", Activation::Relu)?;
    b.flatten("flatten")?;

    let side = (((input_size - 4) / 2 - 4) / 2).saturating_sub(4);
    b.dense("f6", 120 * side * side, num_classes)?;
    b.activation("softmax", Activation::Softmax)?;
    b.finish()
}

pub fn build_vgg16(input_size: usize, num_classes: usize) -> Result<ModelGraph> {
    build_vgg16_seeded(input_size, num_classes, DEFAULT_INIT_SEED)
}

/// Standard 13-conv VGG16 body (3x3 kernels, stride 1, same padding, max
/// pooling 2x2/2 after each block) with a head reduced to dense(256) ->
/// dense(num_classes) for small inputs.
pub fn build_vgg16_seeded(input_size: usize, num_classes: usize, seed: u64) -> Result<ModelGraph> {
    if input_size < 32 {
        return Err(ModelError::Invalid(format!(
            "VGG16 needs input_size >= 32 to survive five poolings, got {input_size}"
        )));
    }
    let mut b = GraphBuilder::new([1, input_size, input_size], num_classes, seed);
    let blocks: [&[usize]; 5] = [
        &[64, 64],
        &[128, 128],
        &[256, 256, 256],
        &[512, 512, 512],
        &[512, 512, 512],
    ];
    let mut channels = 1;
    let mut side = input_size;
    for (bi, widths) in blocks.iter().enumerate() {
        for (ci, &width) in widths.iter().enumerate() {
            let name = format!("block{}_conv{}", bi + 1, ci + 1);
            b.conv(&name, channels, width, ConvSpec::new(3, 1, Padding::Same), None)?;
            b.activation(&format!("block{}_relu{}", bi + 1, ci + 1), Activation::Relu)?;
            channels = width;
        }
        b.pool(&format!("block{}_pool", bi + 1), 2, 2, PoolMode::Max)?;
        side = (side - 2) / 2 + 1;
    }
    b.flatten("flatten")?;
    b.dense("fc1", channels * side * side, 256)?;
    b.activation("fc1_relu", Activation::Relu)?;
    b.dropout("fc1_dropout", 0.5)?;
    b.dense("fc2", 256, num_classes)?;
    b.activation("softmax", Activation::Softmax)?;
    b.finish()
}

pub fn build_mobilenetv2(input_size: usize, num_classes: usize, width_mult: f32) -> Result<ModelGraph> {
    build_mobilenetv2_seeded(input_size, num_classes, width_mult, DEFAULT_INIT_SEED)
}

/// Rounds a scaled channel count to a multiple of 8, never losing more than
/// 10% of the requested width.
fn make_divisible(v: f32) -> usize {
    let new_v = ((v + 4.0) as usize / 8 * 8).max(8);
    if (new_v as f32) < 0.9 * v {
        new_v + 8
    } else {
        new_v
    }
}

/// MobileNetV2: inverted residual blocks (1x1 expand + ReLU6, depthwise 3x3
/// + ReLU6, linear 1x1 project) with shortcuts between the thin bottlenecks
/// whenever stride is 1 and channel counts match. Batchnorm after every
/// convolution; global average pooling head.
pub fn build_mobilenetv2_seeded(
    input_size: usize,
    num_classes: usize,
    width_mult: f32,
    seed: u64,
) -> Result<ModelGraph> {
    if width_mult <= 0.0 {
        return Err(ModelError::Invalid(format!(
            "width multiplier must be positive, got {width_mult}"
        )));
    }
    const BN_EPS: f32 = 1e-3;
    // (expansion t, channels c, repeats n, first stride s)
    const BLOCKS: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let mut b = GraphBuilder::new([1, input_size, input_size], num_classes, seed);
    let mut side = input_size;

    let mut channels = make_divisible(32.0 * width_mult);
    b.conv("stem_conv", 1, channels, ConvSpec::new(3, 2, Padding::Same), None)?;
    b.batchnorm("stem_bn", channels, BN_EPS)?;
    b.activation("stem_relu6", Activation::Relu6)?;
    side = side.div_ceil(2);

    let mut block_idx = 0;
    for (t, c, n, s) in BLOCKS {
        let out_ch = make_divisible(c as f32 * width_mult);
        for rep in 0..n {
            let stride = if rep == 0 { s } else { 1 };
            let hidden = channels * t;
            let block_input = b.tip.clone();
            let p = format!("b{block_idx}");

            if t != 1 {
                b.conv(&format!("{p}_expand"), channels, hidden, ConvSpec::new(1, 1, Padding::Same), None)?;
                b.batchnorm(&format!("{p}_expand_bn"), hidden, BN_EPS)?;
                b.activation(&format!("{p}_expand_relu6"), Activation::Relu6)?;
            }
            b.conv(
                &format!("{p}_dw"),
                hidden,
                hidden,
                ConvSpec::new(3, stride, Padding::Same).with_groups(hidden),
                None,
            )?;
            b.batchnorm(&format!("{p}_dw_bn"), hidden, BN_EPS)?;
            b.activation(&format!("{p}_dw_relu6"), Activation::Relu6)?;
            // linear bottleneck: no activation after the projection
            b.conv(&format!("{p}_project"), hidden, out_ch, ConvSpec::new(1, 1, Padding::Same), None)?;
            b.batchnorm(&format!("{p}_project_bn"), out_ch, BN_EPS)?;
            if stride == 1 && channels == out_ch {
                let tip = b.tip.clone();
                b.residual_add(&format!("{p}_add"), &block_input, &tip)?;
            }
            if stride == 2 {
                side = side.div_ceil(2);
            }
            channels = out_ch;
            block_idx += 1;
        }
    }

    let last = 1280;
    b.conv("head_conv", channels, last, ConvSpec::new(1, 1, Padding::Same), None)?;
    b.batchnorm("head_bn", last, BN_EPS)?;
    b.activation("head_relu6", Activation::Relu6)?;
    b.pool("head_pool", side, 1, PoolMode::Avg)?;
    b.flatten("flatten")?;
    b.dropout("head_dropout", 0.2)?;
    b.dense("classifier", last, num_classes)?;
    b.activation("softmax", Activation::Softmax)?;
    b.finish()
}
