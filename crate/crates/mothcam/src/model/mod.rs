//! Layer-graph model representation and evaluation.
//!
//! A [`ModelGraph`] is an ordered DAG of typed layers plus a weight store.
//! Layers name their predecessors; the reserved name `"input"` refers to the
//! graph input. A layer listing several non-residual inputs concatenates
//! them along the channel axis, which is what makes horizontal fusion in the
//! optimizer representable. The last layer of every built model is a softmax,
//! so `forward` always yields a probability vector over the classes.

mod builders;
mod weights;

pub use builders::{
    build_lenet5, build_lenet5_seeded, build_mobilenetv2, build_mobilenetv2_seeded, build_vgg16,
    build_vgg16_seeded, DEFAULT_INIT_SEED,
};
pub use weights::WeightsError;

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{
    self, Activation, BnBatchCache, ConvSpec, PoolMode, Tensor, TensorError,
};

/// Reserved input name usable in any layer's `inputs` list.
pub const INPUT: &str = "input";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error("layer '{layer}' references unknown input '{input}'")]
    UnknownInput { layer: String, input: String },
    #[error("duplicate layer name '{0}'")]
    DuplicateLayer(String),
    #[error("residual_add '{layer}' needs exactly 2 inputs, got {got}")]
    ResidualArity { layer: String, got: usize },
    #[error("residual_add '{layer}' inputs have different shapes")]
    ResidualShape { layer: String },
    #[error("layer '{layer}' expects {expected} weight tensors, got {got}")]
    WeightCount { layer: String, expected: usize, got: usize },
    #[error("model input shape {expected:?} does not match tensor {got:?}")]
    InputShape { expected: [usize; 3], got: Vec<usize> },
    #[error("no weights stored for layer '{0}'")]
    MissingWeights(String),
    #[error("invalid model: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Layer discriminator, mirrored by the payload in [`LayerParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    Pool,
    Dense,
    Batchnorm,
    Activation,
    Dropout,
    Flatten,
    ResidualAdd,
}

/// Which input feature maps each output map of a convolution reads.
/// Entries not listed are structurally zero and receive no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionTable {
    pub out_channels: usize,
    pub in_channels: usize,
    allowed: Vec<bool>,
}

impl ConnectionTable {
    pub fn new(out_channels: usize, in_channels: usize, connections: &[&[usize]]) -> Self {
        assert_eq!(connections.len(), out_channels);
        let mut allowed = vec![false; out_channels * in_channels];
        for (o, ins) in connections.iter().enumerate() {
            for &i in ins.iter() {
                allowed[o * in_channels + i] = true;
            }
        }
        ConnectionTable {
            out_channels,
            in_channels,
            allowed,
        }
    }

    pub fn connected(&self, out_ch: usize, in_ch: usize) -> bool {
        self.allowed[out_ch * self.in_channels + in_ch]
    }

    /// Zeroes the weight entries of unconnected (out, in) channel pairs.
    pub fn apply(&self, weights: &mut Tensor) {
        let [c_out, c_in, kh, kw] = *weights.shape() else { return };
        let data = weights.data_mut();
        for o in 0..c_out {
            for i in 0..c_in {
                if !self.allowed[o * self.in_channels + i] {
                    let base = (o * c_in + i) * kh * kw;
                    data[base..base + kh * kw].fill(0.0);
                }
            }
        }
    }
}

/// Kind-specific layer configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv {
        spec: ConvSpec,
        out_channels: usize,
        connectivity: Option<ConnectionTable>,
    },
    Pool {
        window: usize,
        stride: usize,
        mode: PoolMode,
    },
    Dense {
        out_features: usize,
    },
    Batchnorm {
        eps: f32,
    },
    Activation {
        kind: Activation,
    },
    Dropout {
        rate: f32,
    },
    Flatten,
    ResidualAdd,
}

/// One node of the model graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub params: LayerParams,
    /// Predecessor layer names (or [`INPUT`]); earlier layers only.
    pub inputs: Vec<String>,
    /// Frozen layers get exactly-zero parameter gradients.
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        params: LayerParams,
        inputs: Vec<String>,
    ) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            params,
            inputs,
            trainable: true,
        }
    }

    fn expected_weight_count(&self) -> usize {
        match self.params {
            LayerParams::Conv { .. } | LayerParams::Dense { .. } => 2,
            LayerParams::Batchnorm { .. } => 4,
            _ => 0,
        }
    }
}

/// Ordered DAG of layers plus weights; the unit every stage operates on.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    weights: HashMap<String, Vec<Tensor>>,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

/// Per-layer context recorded by a training forward pass.
enum TapeAux {
    None,
    Input(Tensor),
    Bn(BnBatchCache),
    Dropout(Vec<f32>),
    Shape(Vec<usize>),
}

struct TapeEntry {
    aux: TapeAux,
    /// Leading-axis size of each input (for splitting concat gradients).
    split: Vec<usize>,
}

/// Recorded intermediates of one training forward pass, consumed by
/// [`ModelGraph::backward`].
pub struct Tape {
    entries: Vec<TapeEntry>,
    /// Probability vector the pass produced.
    pub output: Tensor,
    /// Per-sample batch statistics of each batchnorm layer, for updating
    /// running statistics: (layer name, mean, var).
    pub bn_stats: Vec<(String, Vec<f32>, Vec<f32>)>,
}

/// Parameter gradients keyed by layer name, aligned with the weight store.
pub struct Gradients {
    pub by_layer: HashMap<String, Vec<Tensor>>,
}

impl Gradients {
    fn zero_like(model: &ModelGraph) -> Self {
        let by_layer = model
            .weights
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    v.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
                )
            })
            .collect();
        Gradients { by_layer }
    }

    /// Elementwise accumulate another gradient set.
    pub fn add(&mut self, other: &Gradients) {
        for (name, tensors) in &mut self.by_layer {
            if let Some(os) = other.by_layer.get(name) {
                for (a, b) in tensors.iter_mut().zip(os) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for tensors in self.by_layer.values_mut() {
            for t in tensors {
                for v in t.data_mut() {
                    *v *= factor;
                }
            }
        }
    }
}

impl ModelGraph {
    pub fn new(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelGraph {
            layers: Vec::new(),
            weights: HashMap::new(),
            input_shape,
            num_classes,
        }
    }

    /// Appends a layer; inputs must reference earlier layers (or `"input"`).
    pub fn add_layer(&mut self, spec: LayerSpec, weights: Vec<Tensor>) -> Result<()> {
        if spec.name == INPUT || self.layers.iter().any(|l| l.name == spec.name) {
            return Err(ModelError::DuplicateLayer(spec.name));
        }
        for input in &spec.inputs {
            if input != INPUT && !self.layers.iter().any(|l| l.name == *input) {
                return Err(ModelError::UnknownInput {
                    layer: spec.name,
                    input: input.clone(),
                });
            }
        }
        if spec.kind == LayerKind::ResidualAdd && spec.inputs.len() != 2 {
            return Err(ModelError::ResidualArity {
                layer: spec.name,
                got: spec.inputs.len(),
            });
        }
        if spec.inputs.is_empty() {
            return Err(ModelError::Invalid(format!("layer '{}' has no inputs", spec.name)));
        }
        let expected = spec.expected_weight_count();
        if weights.len() != expected {
            return Err(ModelError::WeightCount {
                layer: spec.name,
                expected,
                got: weights.len(),
            });
        }
        if expected > 0 {
            self.weights.insert(spec.name.clone(), weights);
        }
        self.layers.push(spec);
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn weights_of(&self, name: &str) -> Option<&[Tensor]> {
        self.weights.get(name).map(|v| v.as_slice())
    }

    pub fn weights_of_mut(&mut self, name: &str) -> Option<&mut Vec<Tensor>> {
        self.weights.get_mut(name)
    }

    /// Weighted layers in graph order with their tensors.
    pub fn iter_weights(&self) -> impl Iterator<Item = (&LayerSpec, &[Tensor])> {
        self.layers
            .iter()
            .filter_map(|l| self.weights.get(&l.name).map(|w| (l, w.as_slice())))
    }

    /// Total number of stored parameter values.
    pub fn param_count(&self) -> usize {
        self.weights.values().flatten().map(Tensor::len).sum()
    }

    /// Sets every stored parameter to zero (mainly for tests and fixtures).
    pub fn zero_weights(&mut self) {
        for tensors in self.weights.values_mut() {
            for t in tensors {
                t.data_mut().fill(0.0);
            }
        }
    }

    fn gather<'a>(
        layer: &LayerSpec,
        values: &'a HashMap<String, Tensor>,
    ) -> Result<Vec<&'a Tensor>> {
        layer
            .inputs
            .iter()
            .map(|n| {
                values.get(n).ok_or_else(|| ModelError::UnknownInput {
                    layer: layer.name.clone(),
                    input: n.clone(),
                })
            })
            .collect()
    }

    fn merge_inputs(layer: &LayerSpec, xs: &[&Tensor]) -> Result<Tensor> {
        if layer.kind == LayerKind::ResidualAdd {
            let (a, b) = (xs[0], xs[1]);
            if a.shape() != b.shape() {
                return Err(ModelError::ResidualShape {
                    layer: layer.name.clone(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            return Ok(Tensor::new(a.shape().to_vec(), data)?);
        }
        if xs.len() == 1 {
            Ok(xs[0].clone())
        } else {
            Ok(Tensor::concat(xs)?)
        }
    }

    fn layer_weights(&self, layer: &LayerSpec) -> Result<&[Tensor]> {
        self.weights
            .get(&layer.name)
            .map(|v| v.as_slice())
            .ok_or_else(|| ModelError::MissingWeights(layer.name.clone()))
    }

    /// Inference forward pass: dropout is identity, batchnorm uses running
    /// statistics. Output is the `[num_classes]` probability vector.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut values: HashMap<String, Tensor> = HashMap::new();
        values.insert(INPUT.to_string(), input.clone());
        let mut last = None;
        for layer in &self.layers {
            let xs = Self::gather(layer, &values)?;
            let merged = Self::merge_inputs(layer, &xs)?;
            let out = match &layer.params {
                LayerParams::Conv { spec, .. } => {
                    let w = self.layer_weights(layer)?;
                    tensor::conv2d(&merged, &w[0], &w[1], spec)?
                }
                LayerParams::Pool { window, stride, mode } => {
                    tensor::pool2d(&merged, *window, *stride, *mode)?
                }
                LayerParams::Dense { .. } => {
                    let w = self.layer_weights(layer)?;
                    tensor::dense(&merged, &w[0], &w[1])?
                }
                LayerParams::Batchnorm { eps } => {
                    let w = self.layer_weights(layer)?;
                    tensor::batchnorm(&merged, &w[2], &w[3], &w[0], &w[1], *eps)?
                }
                LayerParams::Activation { kind } => tensor::activation(&merged, *kind),
                LayerParams::Dropout { .. } => merged,
                LayerParams::Flatten => merged.reshape(vec![merged.len()])?,
                LayerParams::ResidualAdd => merged,
            };
            last = Some(layer.name.clone());
            values.insert(layer.name.clone(), out);
        }
        let name = last.ok_or_else(|| ModelError::Invalid("empty model".into()))?;
        Ok(values.remove(&name).expect("last layer value"))
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape {
            return Err(ModelError::InputShape {
                expected: self.input_shape,
                got: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Training forward pass: records per-layer context on a [`Tape`],
    /// applies inverted dropout using `rng`, and computes batchnorm from the
    /// sample's own statistics.
    pub fn forward_train(&self, input: &Tensor, rng: &mut impl Rng) -> Result<Tape> {
        self.check_input(input)?;
        let mut values: HashMap<String, Tensor> = HashMap::new();
        values.insert(INPUT.to_string(), input.clone());
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::new();
        let mut last = None;
        for layer in &self.layers {
            let xs = Self::gather(layer, &values)?;
            let split: Vec<usize> = xs.iter().map(|t| t.shape()[0]).collect();
            let merged = Self::merge_inputs(layer, &xs)?;
            let (out, aux) = match &layer.params {
                LayerParams::Conv { spec, .. } => {
                    let w = self.layer_weights(layer)?;
                    let out = tensor::conv2d(&merged, &w[0], &w[1], spec)?;
                    (out, TapeAux::Input(merged))
                }
                LayerParams::Pool { window, stride, mode } => {
                    let out = tensor::pool2d(&merged, *window, *stride, *mode)?;
                    (out, TapeAux::Input(merged))
                }
                LayerParams::Dense { .. } => {
                    let w = self.layer_weights(layer)?;
                    let out = tensor::dense(&merged, &w[0], &w[1])?;
                    (out, TapeAux::Input(merged))
                }
                LayerParams::Batchnorm { eps } => {
                    let w = self.layer_weights(layer)?;
                    let (out, cache) = tensor::batchnorm_train_forward(&merged, &w[0], &w[1], *eps)?;
                    bn_stats.push((layer.name.clone(), cache.mean.clone(), cache.var.clone()));
                    (out, TapeAux::Bn(cache))
                }
                LayerParams::Activation { kind } => {
                    let out = tensor::activation(&merged, *kind);
                    (out, TapeAux::Input(merged))
                }
                LayerParams::Dropout { rate } => {
                    let keep = 1.0 - *rate;
                    let mask: Vec<f32> = (0..merged.len())
                        .map(|_| if rng.gen::<f32>() < *rate { 0.0 } else { 1.0 / keep })
                        .collect();
                    let data = merged.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                    (Tensor::new(merged.shape().to_vec(), data)?, TapeAux::Dropout(mask))
                }
                LayerParams::Flatten => {
                    let shape = merged.shape().to_vec();
                    (merged.reshape(vec![merged.len()])?, TapeAux::Shape(shape))
                }
                LayerParams::ResidualAdd => (merged, TapeAux::None),
            };
            entries.push(TapeEntry { aux, split });
            last = Some(layer.name.clone());
            values.insert(layer.name.clone(), out);
        }
        let name = last.ok_or_else(|| ModelError::Invalid("empty model".into()))?;
        Ok(Tape {
            entries,
            output: values.remove(&name).expect("last layer value"),
            bn_stats,
        })
    }

    /// Backpropagates `output_grad` (gradient w.r.t. the model output)
    /// through the recorded pass.
    pub fn backward(&self, tape: &Tape, output_grad: &Tensor) -> Result<Gradients> {
        self.backward_from(tape, output_grad, self.layers.len())
    }

    /// Backpropagates a gradient w.r.t. the *input of the final softmax*
    /// (the logits), as produced by a fused softmax/cross-entropy loss.
    pub fn backward_from_logits(&self, tape: &Tape, logit_grad: &Tensor) -> Result<Gradients> {
        let Some(final_layer) = self.layers.last() else {
            return Err(ModelError::Invalid("empty model".into()));
        };
        if !matches!(
            final_layer.params,
            LayerParams::Activation { kind: Activation::Softmax }
        ) {
            return Err(ModelError::Invalid(
                "backward_from_logits requires a final softmax layer".into(),
            ));
        }
        self.backward_from(tape, logit_grad, self.layers.len() - 1)
    }

    /// Reverse walk seeding `seed_grad` as the output gradient of layer
    /// `start - 1` (`start == len` seeds the model output itself).
    fn backward_from(&self, tape: &Tape, seed_grad: &Tensor, start: usize) -> Result<Gradients> {
        if tape.entries.len() != self.layers.len() || start == 0 {
            return Err(TensorError::missing_context("tape does not match model").into());
        }
        let mut grads = Gradients::zero_like(self);
        let mut flowing: HashMap<String, Tensor> = HashMap::new();
        flowing.insert(self.layers[start - 1].name.clone(), seed_grad.clone());

        for idx in (0..start).rev() {
            let layer = &self.layers[idx];
            let entry = &tape.entries[idx];
            let Some(gout) = flowing.remove(&layer.name) else {
                continue; // output unused downstream: nothing flows
            };
            let gin = match (&layer.params, &entry.aux) {
                (LayerParams::Conv { spec, connectivity, .. }, TapeAux::Input(x)) => {
                    let w = self.layer_weights(layer)?;
                    let (gx, mut gw, gb) = tensor::conv2d_backward(x, &w[0], spec, &gout)?;
                    if let Some(table) = connectivity {
                        table.apply(&mut gw);
                    }
                    self.store_grads(&mut grads, layer, vec![gw, gb]);
                    gx
                }
                (LayerParams::Pool { window, stride, mode }, TapeAux::Input(x)) => {
                    tensor::pool2d_backward(x, *window, *stride, *mode, &gout)?
                }
                (LayerParams::Dense { .. }, TapeAux::Input(x)) => {
                    let w = self.layer_weights(layer)?;
                    let (gx, gw, gb) = tensor::dense_backward(x, &w[0], &gout)?;
                    self.store_grads(&mut grads, layer, vec![gw, gb]);
                    gx
                }
                (LayerParams::Batchnorm { .. }, TapeAux::Bn(cache)) => {
                    let w = self.layer_weights(layer)?;
                    let (gx, dgamma, dbeta) = tensor::batchnorm_train_backward(cache, &w[0], &gout)?;
                    let zeros = Tensor::zeros(dgamma.shape().to_vec());
                    self.store_grads(&mut grads, layer, vec![dgamma, dbeta, zeros.clone(), zeros]);
                    gx
                }
                (LayerParams::Activation { kind }, TapeAux::Input(x)) => {
                    tensor::activation_backward(*kind, x, &gout)?
                }
                (LayerParams::Dropout { .. }, TapeAux::Dropout(mask)) => {
                    let data = gout.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    Tensor::new(gout.shape().to_vec(), data)?
                }
                (LayerParams::Flatten, TapeAux::Shape(shape)) => gout.reshape(shape.clone())?,
                (LayerParams::ResidualAdd, TapeAux::None) => {
                    for input in &layer.inputs {
                        if input != INPUT {
                            accumulate(&mut flowing, input, gout.clone());
                        }
                    }
                    continue;
                }
                _ => return Err(TensorError::missing_context(&layer.name).into()),
            };
            // route the merged-input gradient back to the producing layers
            if layer.inputs.len() == 1 {
                if layer.inputs[0] != INPUT {
                    accumulate(&mut flowing, &layer.inputs[0], gin);
                }
            } else {
                for (input, part) in layer.inputs.iter().zip(gin.split(&entry.split)?) {
                    if input != INPUT {
                        accumulate(&mut flowing, input, part);
                    }
                }
            }
        }
        Ok(grads)
    }

    fn store_grads(&self, grads: &mut Gradients, layer: &LayerSpec, tensors: Vec<Tensor>) {
        if !layer.trainable {
            return; // frozen layers keep their zero gradients
        }
        grads.by_layer.insert(layer.name.clone(), tensors);
    }

    /// Infers the output shape of every layer starting from `input_shape`.
    pub fn infer_shapes(&self) -> Result<HashMap<String, Vec<usize>>> {
        let mut shapes: HashMap<String, Vec<usize>> = HashMap::new();
        shapes.insert(INPUT.to_string(), self.input_shape.to_vec());
        for layer in &self.layers {
            let ins: Vec<Vec<usize>> = layer
                .inputs
                .iter()
                .map(|n| {
                    shapes.get(n).cloned().ok_or_else(|| ModelError::UnknownInput {
                        layer: layer.name.clone(),
                        input: n.clone(),
                    })
                })
                .collect::<Result<_>>()?;
            let merged = if layer.kind == LayerKind::ResidualAdd {
                if ins[0] != ins[1] {
                    return Err(ModelError::ResidualShape { layer: layer.name.clone() });
                }
                ins[0].clone()
            } else if ins.len() == 1 {
                ins[0].clone()
            } else {
                let mut s = ins[0].clone();
                s[0] = ins.iter().map(|v| v[0]).sum();
                s
            };
            let out = match &layer.params {
                LayerParams::Conv { spec, out_channels, .. } => {
                    let (oh, _) = spec.out_dim(merged[1], spec.kernel_h)?;
                    let (ow, _) = spec.out_dim(merged[2], spec.kernel_w)?;
                    vec![*out_channels, oh, ow]
                }
                LayerParams::Pool { window, stride, .. } => {
                    if merged[1] < *window || merged[2] < *window {
                        return Err(ModelError::Invalid(format!(
                            "pool '{}' window {window} exceeds input {}x{}",
                            layer.name, merged[1], merged[2]
                        )));
                    }
                    vec![
                        merged[0],
                        (merged[1] - window) / stride + 1,
                        (merged[2] - window) / stride + 1,
                    ]
                }
                LayerParams::Dense { out_features } => vec![*out_features],
                LayerParams::Flatten => vec![merged.iter().product()],
                _ => merged,
            };
            shapes.insert(layer.name.clone(), out);
        }
        Ok(shapes)
    }

    /// Full structural check: shapes propagate, weights match their specs,
    /// and the graph ends in a `[num_classes]` softmax.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.infer_shapes()?;
        for layer in &self.layers {
            let Some(w) = self.weights.get(&layer.name) else {
                if layer.expected_weight_count() > 0 {
                    return Err(ModelError::MissingWeights(layer.name.clone()));
                }
                continue;
            };
            let in_channels: usize = layer.inputs.iter().map(|n| shapes[n][0]).sum();
            match &layer.params {
                LayerParams::Conv { spec, out_channels, .. } => {
                    let expect = vec![
                        *out_channels,
                        in_channels / spec.groups,
                        spec.kernel_h,
                        spec.kernel_w,
                    ];
                    if w[0].shape() != expect || w[1].shape() != [*out_channels] {
                        return Err(ModelError::Invalid(format!(
                            "conv '{}' weight shapes {:?}/{:?} do not match spec {:?}",
                            layer.name,
                            w[0].shape(),
                            w[1].shape(),
                            expect
                        )));
                    }
                }
                LayerParams::Dense { out_features } => {
                    let expect = vec![*out_features, in_channels];
                    if w[0].shape() != expect || w[1].shape() != [*out_features] {
                        return Err(ModelError::Invalid(format!(
                            "dense '{}' weight shapes {:?}/{:?} do not match spec {:?}",
                            layer.name,
                            w[0].shape(),
                            w[1].shape(),
                            expect
                        )));
                    }
                }
                LayerParams::Batchnorm { .. } => {
                    if w.iter().any(|t| t.shape() != [in_channels]) {
                        return Err(ModelError::Invalid(format!(
                            "batchnorm '{}' parameter shapes do not match {in_channels} channels",
                            layer.name
                        )));
                    }
                }
                _ => {}
            }
        }
        let Some(final_layer) = self.layers.last() else {
            return Err(ModelError::Invalid("empty model".into()));
        };
        let out = &shapes[&final_layer.name];
        let is_softmax = matches!(
            final_layer.params,
            LayerParams::Activation { kind: Activation::Softmax }
        );
        if !is_softmax || out != &vec![self.num_classes] {
            return Err(ModelError::Invalid(format!(
                "model must end in a [{}] softmax, found '{}' with shape {:?}",
                self.num_classes, final_layer.name, out
            )));
        }
        Ok(())
    }

    /// Human-readable per-layer summary; stable across runs.
    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let shapes = self.infer_shapes();
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:<14} {:<16} {:>10}", "layer", "kind", "output", "params");
        let mut total = 0usize;
        for layer in &self.layers {
            let params: usize = self
                .weights
                .get(&layer.name)
                .map(|ws| ws.iter().map(Tensor::len).sum())
                .unwrap_or(0);
            total += params;
            let shape = shapes
                .as_ref()
                .ok()
                .and_then(|s| s.get(&layer.name))
                .map(|s| format!("{s:?}"))
                .unwrap_or_else(|| "?".into());
            let _ = writeln!(
                out,
                "{:<22} {:<14} {:<16} {:>10}",
                layer.name,
                format!("{:?}", layer.kind).to_lowercase(),
                shape,
                params
            );
        }
        let _ = writeln!(out, "total parameters: {total}");
        out
    }

    /// Serializes weights to the binary weight-file format.
    pub fn save_weights(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        weights::save(self, path.as_ref()).map_err(ModelError::from)
    }

    /// Loads weights from `path` into this architecture skeleton, validating
    /// layer names and tensor shapes against the graph.
    pub fn load_weights(mut self, path: impl AsRef<std::path::Path>) -> Result<ModelGraph> {
        weights::load_into(&mut self, path.as_ref())?;
        Ok(self)
    }
}

fn accumulate(flowing: &mut HashMap<String, Tensor>, name: &str, grad: Tensor) {
    match flowing.get_mut(name) {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a += b;
            }
        }
        None => {
            flowing.insert(name.to_string(), grad);
        }
    }
}

#[cfg(test)]
mod tests;
