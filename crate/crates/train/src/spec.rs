//! Network description: layer kinds, quantization settings, and the two
//! built-in desk-scale architectures.

use std::fmt;

use hbnn_core::{DistPolicy, SortHeuristic};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

/// Heterogeneous binarization settings for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSpec {
    /// Average bitwidth.
    pub bits: f64,
    pub heuristic: SortHeuristic,
    pub policy: DistPolicy,
}

impl QuantSpec {
    pub fn new(bits: f64) -> Self {
        Self {
            bits,
            heuristic: SortHeuristic::MiddleOut,
            policy: DistPolicy::Adjacent,
        }
    }

    pub fn with_heuristic(mut self, heuristic: SortHeuristic) -> Self {
        self.heuristic = heuristic;
        self
    }

    pub fn with_policy(mut self, policy: DistPolicy) -> Self {
        self.policy = policy;
        self
    }
}

impl fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}b/{}/{}", self.bits, self.heuristic, self.policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// One filter per channel.
    DepthwiseConv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// 1×1 convolution.
    PointwiseConv2d { in_ch: usize, out_ch: usize },
    Dense { in_features: usize, out_features: usize },
    BatchNorm { channels: usize },
    Relu,
    GlobalAvgPool,
    /// Binarizes its input using the layer's `input_quant`.
    ActivationBinarize,
    /// Multiplies by a single learned scalar.
    Scaling,
    /// Terminal loss layer; `forward` stops before it and returns logits.
    SoftmaxCrossEntropy,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::DepthwiseConv2d { .. } => "depthwise-conv2d",
            LayerKind::PointwiseConv2d { .. } => "pointwise-conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::BatchNorm { .. } => "batch-norm",
            LayerKind::Relu => "relu",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::ActivationBinarize => "activation-binarize",
            LayerKind::Scaling => "scaling",
            LayerKind::SoftmaxCrossEntropy => "softmax-cross-entropy",
        }
    }

    /// Layers whose weights can be binarized.
    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. }
                | LayerKind::DepthwiseConv2d { .. }
                | LayerKind::PointwiseConv2d { .. }
                | LayerKind::Dense { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// `None` keeps weights full precision.
    pub weight_quant: Option<QuantSpec>,
    /// Binarization of the layer input; `None` keeps it full precision.
    pub input_quant: Option<QuantSpec>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            weight_quant: None,
            input_quant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input dimensions `[c, h, w]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// First and last weight layers never binarize their inputs.
    pub exclude_io: bool,
}

impl NetworkSpec {
    fn weight_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.has_weights())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let weight_layers = self.weight_layers();
        if weight_layers.is_empty() {
            return Err(TrainError::InvalidNetwork("no weight layers".into()));
        }
        if self.exclude_io {
            for &i in [weight_layers[0], *weight_layers.last().unwrap()].iter() {
                if self.layers[i].input_quant.is_some() {
                    return Err(TrainError::InvalidNetwork(format!(
                        "layer {i} ({}) is an input/output layer and may not binarize its input",
                        self.layers[i].kind.name()
                    )));
                }
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight_quant.is_some() && !l.kind.has_weights() {
                return Err(TrainError::InvalidNetwork(format!(
                    "layer {i} ({}) has no weights to binarize",
                    l.kind.name()
                )));
            }
            if l.kind == LayerKind::ActivationBinarize && l.input_quant.is_none() {
                return Err(TrainError::InvalidNetwork(format!(
                    "layer {i}: activation-binarize needs an input_quant"
                )));
            }
            for q in l.weight_quant.iter().chain(l.input_quant.iter()) {
                hbnn_core::bitalloc::dist_from_avg(q.bits, &q.policy)?;
            }
        }
        match self.layers.last().map(|l| l.kind) {
            Some(LayerKind::SoftmaxCrossEntropy) => Ok(()),
            _ => Err(TrainError::InvalidNetwork(
                "last layer must be softmax-cross-entropy".into(),
            )),
        }
    }

    /// Sets weight binarization on every weight layer (`None` = full
    /// precision) and input binarization on every weight layer except the
    /// first and last when `exclude_io` is set.
    pub fn quantized(mut self, inputs: Option<QuantSpec>, weights: Option<QuantSpec>) -> Self {
        let wl = self.weight_layers();
        for (pos, &i) in wl.iter().enumerate() {
            self.layers[i].weight_quant = weights.clone();
            let io = pos == 0 || pos + 1 == wl.len();
            self.layers[i].input_quant = if self.exclude_io && io {
                None
            } else {
                inputs.clone()
            };
        }
        self
    }

    /// Homogeneous per-layer weight bitwidths (layer-level heterogeneity).
    pub fn with_layer_bits(mut self, bits: &[u8]) -> Result<Self> {
        let wl = self.weight_layers();
        if bits.len() != wl.len() {
            return Err(TrainError::InvalidNetwork(format!(
                "{} layer bitwidths for {} weight layers",
                bits.len(),
                wl.len()
            )));
        }
        for (&i, &b) in wl.iter().zip(bits) {
            self.layers[i].weight_quant = Some(QuantSpec::new(b as f64));
        }
        Ok(self)
    }

    /// Number of weights in `layer` (0 for parameterless layers).
    pub fn weight_count(&self, layer: usize) -> usize {
        match self.layers[layer].kind {
            LayerKind::Conv2d { in_ch, out_ch, kernel, .. } => in_ch * out_ch * kernel * kernel,
            LayerKind::DepthwiseConv2d { channels, kernel, .. } => channels * kernel * kernel,
            LayerKind::PointwiseConv2d { in_ch, out_ch } => in_ch * out_ch,
            LayerKind::Dense { in_features, out_features } => in_features * out_features,
            _ => 0,
        }
    }
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::new(LayerKind::Conv2d {
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
    })
}

fn bn(channels: usize) -> LayerSpec {
    LayerSpec::new(LayerKind::BatchNorm { channels })
}

/// Four-layer fully convolutional classifier for `3×32×32` inputs:
/// three stride-2 3×3 conv + batch-norm blocks and a 4×4 conv to
/// `classes` channels, then a scaling layer. With `binarized_inputs` the
/// ReLUs are dropped so the binarizers see batch-norm outputs directly.
pub fn four_layer_convnet(width: usize, classes: usize, binarized_inputs: bool) -> NetworkSpec {
    let mut layers = Vec::new();
    let chans = [3, width, 2 * width, 2 * width];
    for i in 0..3 {
        layers.push(conv(chans[i], chans[i + 1], 3, 2, 1));
        layers.push(bn(chans[i + 1]));
        if !binarized_inputs {
            layers.push(LayerSpec::new(LayerKind::Relu));
        }
    }
    layers.push(conv(chans[3], classes, 4, 1, 0));
    layers.push(LayerSpec::new(LayerKind::GlobalAvgPool));
    layers.push(LayerSpec::new(LayerKind::Scaling));
    layers.push(LayerSpec::new(LayerKind::SoftmaxCrossEntropy));
    NetworkSpec {
        name: "convnet4".into(),
        input: [3, 32, 32],
        layers,
        exclude_io: true,
    }
}

/// Stem conv followed by three depthwise-separable blocks (depthwise 3×3
/// then pointwise 1×1), global pooling and a dense classifier.
/// [`separable_depthwise_only`] binarizes just the depthwise weights.
pub fn separable_convnet(width: usize, classes: usize) -> NetworkSpec {
    let mut layers = vec![conv(3, width, 3, 1, 1), bn(width), LayerSpec::new(LayerKind::Relu)];
    let mut ch = width;
    for _ in 0..3 {
        layers.push(LayerSpec::new(LayerKind::DepthwiseConv2d {
            channels: ch,
            kernel: 3,
            stride: 2,
            padding: 1,
        }));
        layers.push(bn(ch));
        layers.push(LayerSpec::new(LayerKind::Relu));
        layers.push(LayerSpec::new(LayerKind::PointwiseConv2d {
            in_ch: ch,
            out_ch: 2 * ch,
        }));
        layers.push(bn(2 * ch));
        layers.push(LayerSpec::new(LayerKind::Relu));
        ch *= 2;
    }
    layers.push(LayerSpec::new(LayerKind::GlobalAvgPool));
    layers.push(LayerSpec::new(LayerKind::Dense {
        in_features: ch,
        out_features: classes,
    }));
    layers.push(LayerSpec::new(LayerKind::Scaling));
    layers.push(LayerSpec::new(LayerKind::SoftmaxCrossEntropy));
    NetworkSpec {
        name: "separable3".into(),
        input: [3, 32, 32],
        layers,
        exclude_io: true,
    }
}

/// Binarizes only the depthwise weights of a separable network.
pub fn separable_depthwise_only(mut spec: NetworkSpec, weights: QuantSpec) -> NetworkSpec {
    for l in spec.layers.iter_mut() {
        if matches!(l.kind, LayerKind::DepthwiseConv2d { .. }) {
            l.weight_quant = Some(weights.clone());
        }
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_validate() {
        four_layer_convnet(16, 10, false).validate().unwrap();
        let q = four_layer_convnet(16, 10, true).quantized(Some(QuantSpec::new(1.4)), Some(QuantSpec::new(1.4)));
        q.validate().unwrap();
        let convs: Vec<&LayerSpec> = q.layers.iter().filter(|l| l.kind.has_weights()).collect();
        assert!(convs[0].input_quant.is_none());
        assert!(convs[1].input_quant.is_some());
        assert!(convs[3].input_quant.is_none());
        separable_convnet(8, 10).validate().unwrap();
    }

    #[test]
    fn exclude_io_enforced() {
        let mut s = four_layer_convnet(8, 10, true);
        s.layers[0].input_quant = Some(QuantSpec::new(1.0));
        assert!(s.validate().is_err());
        s.exclude_io = false;
        s.validate().unwrap();
    }

    #[test]
    fn depthwise_only() {
        let s = separable_depthwise_only(separable_convnet(8, 10), QuantSpec::new(1.4));
        for l in &s.layers {
            let dw = matches!(l.kind, LayerKind::DepthwiseConv2d { .. });
            assert_eq!(l.weight_quant.is_some(), dw);
        }
    }

    #[test]
    fn layer_bits() {
        let s = four_layer_convnet(8, 10, false).with_layer_bits(&[1, 2, 2, 3]).unwrap();
        let bits: Vec<f64> = s.layers.iter().filter_map(|l| l.weight_quant.as_ref().map(|q| q.bits)).collect();
        assert_eq!(bits, vec![1.0, 2.0, 2.0, 3.0]);
        assert!(four_layer_convnet(8, 10, false).with_layer_bits(&[1]).is_err());
    }
}
