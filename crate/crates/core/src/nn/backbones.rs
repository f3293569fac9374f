//! Headless feature extractors: ResNet50V2, DenseNet-169, MobileNetV2 and a
//! small three-block CNN for desk-scale runs.
//!
//! Layer layouts, bias usage and normalization epsilons follow the Keras
//! application definitions (`include_top=False`), so parameter counts agree
//! with the published models for the same input channel count.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ops::{BatchNorm, Conv2d, DepthwiseConv2d, FeatureMap, Padding, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    DenseNet169,
    ResNet50V2,
    MobileNetV2,
    Tiny,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::DenseNet169 => "densenet169",
            BackboneKind::ResNet50V2 => "resnet50v2",
            BackboneKind::MobileNetV2 => "mobilenetv2",
            BackboneKind::Tiny => "tiny",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "densenet169" | "densenet" => Ok(BackboneKind::DenseNet169),
            "resnet50v2" | "resnet" => Ok(BackboneKind::ResNet50V2),
            "mobilenetv2" | "mobilenet" => Ok(BackboneKind::MobileNetV2),
            "tiny" => Ok(BackboneKind::Tiny),
            other => Err(other.to_string()),
        }
    }
}

const RESNET_BN_EPS: f32 = 1.001e-5;
const DENSENET_BN_EPS: f32 = 1.001e-5;
const MOBILENET_BN_EPS: f32 = 1e-3;

pub(crate) trait Network: Send + Sync {
    fn forward(&self, store: &ParamStore, x: FeatureMap) -> FeatureMap;
    /// (h, w, c) of the output for a square input of side `size`.
    fn output_shape(&self, size: usize) -> (usize, usize, usize);
}

// ---------------------------------------------------------------- ResNet50V2

struct PreactBlock {
    preact_bn: BatchNorm,
    shortcut: Option<Conv2d>,
    stride: usize,
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
}

impl PreactBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, filters: usize, stride: usize, conv_shortcut: bool) -> Self {
        PreactBlock {
            preact_bn: BatchNorm::new(store, &format!("{name}_preact_bn"), cin, RESNET_BN_EPS),
            shortcut: conv_shortcut.then(|| {
                Conv2d::new(store, &format!("{name}_0_conv"), cin, 4 * filters, 1, stride, Padding::Valid, true)
            }),
            stride,
            conv1: Conv2d::new(store, &format!("{name}_1_conv"), cin, filters, 1, 1, Padding::Valid, false),
            bn1: BatchNorm::new(store, &format!("{name}_1_bn"), filters, RESNET_BN_EPS),
            conv2: Conv2d::new(store, &format!("{name}_2_conv"), filters, filters, 3, stride, Padding::Explicit(1), false),
            bn2: BatchNorm::new(store, &format!("{name}_2_bn"), filters, RESNET_BN_EPS),
            conv3: Conv2d::new(store, &format!("{name}_3_conv"), filters, 4 * filters, 1, 1, Padding::Valid, true),
        }
    }

    fn forward(&self, store: &ParamStore, x: FeatureMap) -> FeatureMap {
        let preact = self.preact_bn.forward(store, x.clone()).relu();
        let shortcut = match &self.shortcut {
            Some(conv) => conv.forward(store, &preact),
            None if self.stride > 1 => x.max_pool(1, self.stride),
            None => x,
        };
        let y = self.bn1.forward(store, self.conv1.forward(store, &preact)).relu();
        let y = self.bn2.forward(store, self.conv2.forward(store, &y)).relu();
        self.conv3.forward(store, &y).add_residual(&shortcut)
    }
}

pub(crate) struct ResNet50V2 {
    conv1: Conv2d,
    blocks: Vec<PreactBlock>,
    post_bn: BatchNorm,
}

impl ResNet50V2 {
    pub(crate) fn new(store: &mut ParamStore, channels: usize) -> Self {
        let conv1 = Conv2d::new(store, "conv1_conv", channels, 64, 7, 2, Padding::Explicit(3), true);
        let mut blocks = Vec::new();
        let mut cin = 64;
        // (filters, blocks, stride of the last block)
        for (stage, (filters, n, stride)) in [(64, 3, 2), (128, 4, 2), (256, 6, 2), (512, 3, 1)].into_iter().enumerate() {
            for b in 0..n {
                let name = format!("conv{}_block{}", stage + 2, b + 1);
                let s = if b + 1 == n { stride } else { 1 };
                blocks.push(PreactBlock::new(store, &name, cin, filters, s, b == 0));
                cin = 4 * filters;
            }
        }
        let post_bn = BatchNorm::new(store, "post_bn", cin, RESNET_BN_EPS);
        ResNet50V2 { conv1, blocks, post_bn }
    }
}

impl Network for ResNet50V2 {
    fn forward(&self, store: &ParamStore, x: FeatureMap) -> FeatureMap {
        let x = self.conv1.forward(store, &x);
        let mut x = x.zero_pad(1, 1, 1, 1).max_pool(3, 2);
        for block in &self.blocks {
            x = block.forward(store, x);
        }
        self.post_bn.forward(store, x).relu()
    }

    fn output_shape(&self, size: usize) -> (usize, usize, usize) {
        let mut s = (self.conv1.output_size(size) + 2 - 3) / 2 + 1;
        for block in &self.blocks {
            s = block.conv2.output_size(s);
        }
        (s, s, self.post_bn.channels)
    }
}

// -------------------------------------------------------------- DenseNet-169

struct DenseLayer {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
}

struct Transition {
    bn: BatchNorm,
    conv: Conv2d,
}

pub(crate) struct DenseNet {
    conv1: Conv2d,
    bn1: BatchNorm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm,
}

impl DenseNet {
    pub(crate) fn new_169(store: &mut ParamStore, channels: usize) -> Self {
        Self::new(store, channels, &[6, 12, 32, 32], 32)
    }

    fn new(store: &mut ParamStore, channels: usize, block_sizes: &[usize], growth: usize) -> Self {
        let conv1 = Conv2d::new(store, "conv1/conv", channels, 64, 7, 2, Padding::Explicit(3), false);
        let bn1 = BatchNorm::new(store, "conv1/bn", 64, DENSENET_BN_EPS);
        let mut c = 64;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, &n) in block_sizes.iter().enumerate() {
            let mut layers = Vec::new();
            for l in 0..n {
                let name = format!("conv{}_block{}", i + 2, l + 1);
                layers.push(DenseLayer {
                    bn1: BatchNorm::new(store, &format!("{name}_0_bn"), c, DENSENET_BN_EPS),
                    conv1: Conv2d::new(store, &format!("{name}_1_conv"), c, 4 * growth, 1, 1, Padding::Valid, false),
                    bn2: BatchNorm::new(store, &format!("{name}_1_bn"), 4 * growth, DENSENET_BN_EPS),
                    conv2: Conv2d::new(store, &format!("{name}_2_conv"), 4 * growth, growth, 3, 1, Padding::Same, false),
                });
                c += growth;
            }
            blocks.push(layers);
            if i + 1 < block_sizes.len() {
                let name = format!("pool{}", i + 2);
                let out = c / 2;
                transitions.push(Transition {
                    bn: BatchNorm::new(store, &format!("{name}_bn"), c, DENSENET_BN_EPS),
                    conv: Conv2d::new(store, &format!("{name}_conv"), c, out, 1, 1, Padding::Valid, false),
                });
                c = out;
            }
        }
        let final_bn = BatchNorm::new(store, "bn", c, DENSENET_BN_EPS);
        DenseNet {
            conv1,
            bn1,
            blocks,
            transitions,
            final_bn,
        }
    }
}

impl Network for DenseNet {
    fn forward(&self, store: &ParamStore, x: FeatureMap) -> FeatureMap {
        let x = self.bn1.forward(store, self.conv1.forward(store, &x)).relu();
        let mut x = x.zero_pad(1, 1, 1, 1).max_pool(3, 2);
        for (i, block) in self.blocks.iter().enumerate() {
            for layer in block {
                let y = layer.bn1.forward(store, x.clone()).relu();
                let y = layer.bn2.forward(store, layer.conv1.forward(store, &y)).relu();
                let y = layer.conv2.forward(store, &y);
                x = x.concat(&y);
            }
            if let Some(t) = self.transitions.get(i) {
                let y = t.bn.forward(store, x).relu();
                x = t.conv.forward(store, &y).avg_pool(2, 2);
            }
        }
        self.final_bn.forward(store, x).relu()
    }

    fn output_shape(&self, size: usize) -> (usize, usize, usize) {
        let mut s = (self.conv1.output_size(size) + 2 - 3) / 2 + 1;
        for _ in &self.transitions {
            s /= 2;
        }
        (s, s, self.final_bn.channels)
    }
}

// --------------------------------------------------------------- MobileNetV2

struct InvertedResidual {
    expand: Option<(Conv2d, BatchNorm)>,
    depthwise: DepthwiseConv2d,
    depthwise_bn: BatchNorm,
    project: Conv2d,
    project_bn: BatchNorm,
    residual: bool,
}

pub(crate) struct MobileNetV2 {
    conv1: Conv2d,
    bn1: BatchNorm,
    blocks: Vec<InvertedResidual>,
    conv_last: Conv2d,
    bn_last: BatchNorm,
}

impl MobileNetV2 {
    pub(crate) fn new(store: &mut ParamStore, channels: usize) -> Self {
        let conv1 = Conv2d::new(store, "Conv1", channels, 32, 3, 2, Padding::Same, false);
        let bn1 = BatchNorm::new(store, "bn_Conv1", 32, MOBILENET_BN_EPS);
        // (expansion, filters, repeats, first stride), width multiplier 1.0
        let settings = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)];
        let mut cin = 32;
        let mut blocks = Vec::new();
        let mut id = 0;
        for (t, filters, n, first_stride) in settings {
            for r in 0..n {
                let stride = if r == 0 { first_stride } else { 1 };
                let name = if id == 0 { "expanded_conv".to_string() } else { format!("block_{id}") };
                let hidden = cin * t;
                let expand = (id > 0).then(|| {
                    (
                        Conv2d::new(store, &format!("{name}_expand"), cin, hidden, 1, 1, Padding::Valid, false),
                        BatchNorm::new(store, &format!("{name}_expand_BN"), hidden, MOBILENET_BN_EPS),
                    )
                });
                blocks.push(InvertedResidual {
                    expand,
                    depthwise: DepthwiseConv2d::new(store, &format!("{name}_depthwise"), hidden, 3, stride, Padding::Same),
                    depthwise_bn: BatchNorm::new(store, &format!("{name}_depthwise_BN"), hidden, MOBILENET_BN_EPS),
                    project: Conv2d::new(store, &format!("{name}_project"), hidden, filters, 1, 1, Padding::Valid, false),
                    project_bn: BatchNorm::new(store, &format!("{name}_project_BN"), filters, MOBILENET_BN_EPS),
                    residual: cin == filters && stride == 1,
                });
                cin = filters;
                id += 1;
            }
        }
        let conv_last = Conv2d::new(store, "Conv_1", cin, 1280, 1, 1, Padding::Valid, false);
        let bn_last = BatchNorm::new(store, "Conv_1_bn", 1280, MOBILENET_BN_EPS);
        MobileNetV2 {
            conv1,
            bn1,
            blocks,
            conv_last,
            bn_last,
        }
    }
}

impl Network for MobileNetV2 {
    fn forward(&self, store: &ParamStore, x: FeatureMap) -> FeatureMap {
        let mut x = self.bn1.forward(store, self.conv1.forward(store, &x)).relu6();
        for b in &self.blocks {
            let mut y = match &b.expand {
                Some((conv, bn)) => bn.forward(store, conv.forward(store, &x)).relu6(),
                None => x.clone(),
            };
            y = b.depthwise_bn.forward(store, b.depthwise.forward(store, &y)).relu6();
            y = b.project_bn.forward(store, b.project.forward(store, &y));
            x = if b.residual { y.add_residual(&x) } else { y };
        }
        self.bn_last.forward(store, self.conv_last.forward(store, &x)).relu6()
    }

    fn output_shape(&self, size: usize) -> (usize, usize, usize) {
        let mut s = self.conv1.output_size(size);
        for b in &self.blocks {
            s = Padding::Same.output_size(s, 3, b.depthwise.stride);
        }
        (s, s, self.bn_last.channels)
    }
}

// ---------------------------------------------------------------------- Tiny

/// Channel widths of the three conv blocks.
pub const TINY_WIDTHS: [usize; 3] = [8, 16, 16];

/// Three blocks of 3×3 same conv (with bias) → ReLU → 2×2 max pool.
pub(crate) struct Tiny {
    convs: Vec<Conv2d>,
}

impl Tiny {
    pub(crate) fn new(store: &mut ParamStore, channels: usize) -> Self {
        let mut cin = channels;
        let convs = TINY_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let conv = Conv2d::new(store, &format!("tiny_block{}_conv", i + 1), cin, cout, 3, 1, Padding::Same, true);
                cin = cout;
                conv
            })
            .collect();
        Tiny { convs }
    }
}

impl Network for Tiny {
    fn forward(&self, store: &ParamStore, mut x: FeatureMap) -> FeatureMap {
        for conv in &self.convs {
            x = conv.forward(store, &x).relu().max_pool(2, 2);
        }
        x
    }

    fn output_shape(&self, size: usize) -> (usize, usize, usize) {
        let s = self.convs.iter().fold(size, |s, _| s / 2);
        (s, s, TINY_WIDTHS[2])
    }
}
