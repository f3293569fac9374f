//! Inference-only convolutional building blocks over HWC feature maps.
//!
//! Backbone weights are never trained, so only forward passes exist here.
//! Padding and pooling follow the Keras conventions the reference
//! architectures were published with.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A single image's activations, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> FeatureMap {
        assert_eq!(data.len(), h * w * c);
        FeatureMap { h, w, c, data }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::new(h, w, c, vec![0.0; h * w * c])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    fn as_matrix(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.h * self.w, self.c), &self.data).unwrap()
    }

    pub fn relu(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self
    }

    pub fn relu6(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0));
        self
    }

    pub fn add_residual(mut self, other: &FeatureMap) -> Self {
        assert_eq!(self.shape(), other.shape(), "residual shapes differ");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        self
    }

    /// Channel concatenation `[self, other]`.
    pub fn concat(&self, other: &FeatureMap) -> FeatureMap {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let c = self.c + other.c;
        let mut data = Vec::with_capacity(self.h * self.w * c);
        for (a, b) in self.data.chunks(self.c).zip(other.data.chunks(other.c)) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        FeatureMap::new(self.h, self.w, c, data)
    }

    pub fn zero_pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> FeatureMap {
        if top + bottom + left + right == 0 {
            return self.clone();
        }
        let (h, w) = (self.h + top + bottom, self.w + left + right);
        let mut out = FeatureMap::zeros(h, w, self.c);
        let row = self.w * self.c;
        for y in 0..self.h {
            let dst = ((y + top) * w + left) * self.c;
            out.data[dst..dst + row].copy_from_slice(&self.data[y * row..(y + 1) * row]);
        }
        out
    }

    /// Valid max pooling.
    pub fn max_pool(&self, k: usize, stride: usize) -> FeatureMap {
        self.pool(k, stride, f32::NEG_INFINITY, f32::max, |v, _| v)
    }

    /// Valid average pooling.
    pub fn avg_pool(&self, k: usize, stride: usize) -> FeatureMap {
        self.pool(k, stride, 0.0, |a, b| a + b, |v, n| v / n as f32)
    }

    fn pool(
        &self,
        k: usize,
        stride: usize,
        init: f32,
        fold: impl Fn(f32, f32) -> f32,
        finish: impl Fn(f32, usize) -> f32,
    ) -> FeatureMap {
        let oh = (self.h - k) / stride + 1;
        let ow = (self.w - k) / stride + 1;
        let mut out = FeatureMap::zeros(oh, ow, self.c);
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = (oy * ow + ox) * self.c;
                let acc = &mut out.data[dst..dst + self.c];
                acc.fill(init);
                for ky in 0..k {
                    for kx in 0..k {
                        let src = ((oy * stride + ky) * self.w + ox * stride + kx) * self.c;
                        for (a, v) in acc.iter_mut().zip(&self.data[src..src + self.c]) {
                            *a = fold(*a, *v);
                        }
                    }
                }
                acc.iter_mut().for_each(|a| *a = finish(*a, k * k));
            }
        }
        out
    }

    /// Row-major flattening (matches a channels-last `Flatten`).
    pub fn flatten(self) -> Vec<f32> {
        self.data
    }
}

/// Spatial padding rule of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// TensorFlow "same": output = ceil(in / stride); any odd padding goes
    /// to the bottom/right.
    Same,
    /// Symmetric zero padding applied before a valid convolution.
    Explicit(usize),
}

impl Padding {
    fn amounts(self, size: usize, k: usize, stride: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Explicit(p) => (p, p),
            Padding::Same => {
                let out = size.div_ceil(stride);
                let total = ((out - 1) * stride + k).saturating_sub(size);
                (total / 2, total - total / 2)
            }
        }
    }

    pub fn output_size(self, size: usize, k: usize, stride: usize) -> usize {
        let (a, b) = self.amounts(size, k, stride);
        (size + a + b - k) / stride + 1
    }
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    GlorotUniform { fan_in: usize, fan_out: usize },
}

/// Flat registry of all parameters of a network, in creation order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    tensors: Vec<NamedTensor>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(rng: ChaCha8Rng) -> ParamStore {
        ParamStore {
            tensors: Vec::new(),
            rng,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> TensorId {
        let len = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::GlorotUniform { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                (0..len).map(|_| self.rng.random_range(-limit..limit)).collect()
            }
        };
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
        TensorId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: TensorId) -> &[f32] {
        &self.tensors[id.0].data
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// 2-D convolution, HWIO kernel, optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: Padding,
    weight: TensorId,
    bias: Option<TensorId>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> Conv2d {
        let receptive = kernel * kernel;
        let weight = store.add(
            format!("{name}/kernel"),
            &[kernel, kernel, cin, cout],
            Init::GlorotUniform {
                fan_in: receptive * cin,
                fan_out: receptive * cout,
            },
        );
        let bias = bias.then(|| store.add(format!("{name}/bias"), &[cout], Init::Zeros));
        Conv2d {
            kernel,
            cin,
            cout,
            stride,
            padding,
            weight,
            bias,
        }
    }

    pub fn output_size(&self, size: usize) -> usize {
        self.padding.output_size(size, self.kernel, self.stride)
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (k, s) = (self.kernel, self.stride);
        let (pt, pb) = self.padding.amounts(x.h, k, s);
        let (pl, pr) = self.padding.amounts(x.w, k, s);
        let padded;
        let x = if pt + pb + pl + pr > 0 {
            padded = x.zero_pad(pt, pb, pl, pr);
            &padded
        } else {
            x
        };
        let oh = (x.h - k) / s + 1;
        let ow = (x.w - k) / s + 1;
        let weight =
            ArrayView2::from_shape((k * k * self.cin, self.cout), store.get(self.weight)).unwrap();
        let mut out = vec![0.0f32; oh * ow * self.cout];
        let mut out_m = ArrayViewMut2::from_shape((oh * ow, self.cout), &mut out).unwrap();
        if k == 1 && s == 1 {
            ndarray::linalg::general_mat_mul(1.0, &x.as_matrix(), &weight, 0.0, &mut out_m);
        } else {
            let cols = k * k * x.c;
            let mut patches = vec![0.0f32; oh * ow * cols];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut patches[(oy * ow + ox) * cols..][..cols];
                    for ky in 0..k {
                        let src = ((oy * s + ky) * x.w + ox * s) * x.c;
                        let len = k * x.c;
                        row[ky * len..(ky + 1) * len].copy_from_slice(&x.data[src..src + len]);
                    }
                }
            }
            let patches = ArrayView2::from_shape((oh * ow, cols), &patches).unwrap();
            ndarray::linalg::general_mat_mul(1.0, &patches, &weight, 0.0, &mut out_m);
        }
        if let Some(b) = self.bias {
            let bias = store.get(b);
            for px in out.chunks_mut(self.cout) {
                px.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        FeatureMap::new(oh, ow, self.cout, out)
    }
}

/// Depthwise 3×3-style convolution with channel multiplier 1, no bias.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
    pub padding: Padding,
    weight: TensorId,
}

impl DepthwiseConv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> DepthwiseConv2d {
        let receptive = kernel * kernel;
        let weight = store.add(
            format!("{name}/depthwise_kernel"),
            &[kernel, kernel, channels, 1],
            Init::GlorotUniform {
                fan_in: receptive * channels,
                fan_out: receptive,
            },
        );
        DepthwiseConv2d {
            kernel,
            channels,
            stride,
            padding,
            weight,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.c, self.channels);
        let (k, s, c) = (self.kernel, self.stride, self.channels);
        let (pt, pb) = self.padding.amounts(x.h, k, s);
        let (pl, pr) = self.padding.amounts(x.w, k, s);
        let x = x.zero_pad(pt, pb, pl, pr);
        let oh = (x.h - k) / s + 1;
        let ow = (x.w - k) / s + 1;
        let w = store.get(self.weight);
        let mut out = FeatureMap::zeros(oh, ow, c);
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = &mut out.data[(oy * ow + ox) * c..][..c];
                for ky in 0..k {
                    for kx in 0..k {
                        let src = &x.data[((oy * s + ky) * x.w + ox * s + kx) * c..][..c];
                        let wk = &w[(ky * k + kx) * c..][..c];
                        for ((a, v), wv) in acc.iter_mut().zip(src).zip(wk) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Batch normalization in inference mode (moving statistics, never updated).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub epsilon: f32,
    gamma: TensorId,
    beta: TensorId,
    mean: TensorId,
    var: TensorId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, epsilon: f32) -> BatchNorm {
        BatchNorm {
            channels,
            epsilon,
            gamma: store.add(format!("{name}/gamma"), &[channels], Init::Ones),
            beta: store.add(format!("{name}/beta"), &[channels], Init::Zeros),
            mean: store.add(format!("{name}/moving_mean"), &[channels], Init::Zeros),
            var: store.add(format!("{name}/moving_variance"), &[channels], Init::Ones),
        }
    }

    pub fn forward(&self, store: &ParamStore, mut x: FeatureMap) -> FeatureMap {
        assert_eq!(x.c, self.channels);
        let (g, b, m, v) = (
            store.get(self.gamma),
            store.get(self.beta),
            store.get(self.mean),
            store.get(self.var),
        );
        let scale: Vec<f32> = (0..self.channels)
            .map(|i| g[i] / (v[i] + self.epsilon).sqrt())
            .collect();
        let shift: Vec<f32> = (0..self.channels).map(|i| b[i] - m[i] * scale[i]).collect();
        for px in x.data.chunks_mut(self.channels) {
            for ((val, sc), sh) in px.iter_mut().zip(&scale).zip(&shift) {
                *val = *val * sc + sh;
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        ParamStore::new(ChaCha8Rng::seed_from_u64(0))
    }

    /// Direct nested-loop convolution, independent of the im2col path.
    fn naive_conv(x: &FeatureMap, w: &[f32], k: usize, cout: usize, s: usize, pad: (usize, usize, usize, usize)) -> FeatureMap {
        let xp = x.zero_pad(pad.0, pad.1, pad.2, pad.3);
        let oh = (xp.h - k) / s + 1;
        let ow = (xp.w - k) / s + 1;
        let mut out = FeatureMap::zeros(oh, ow, cout);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            for ci in 0..x.c {
                                let v = xp.data[((oy * s + ky) * xp.w + ox * s + kx) * x.c + ci];
                                let wv = w[((ky * k + kx) * x.c + ci) * cout + co];
                                acc += f64::from(v) * f64::from(wv);
                            }
                        }
                    }
                    out.data[(oy * ow + ox) * cout + co] = acc as f32;
                }
            }
        }
        out
    }

    fn ramp(h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::new(h, w, c, (0..h * w * c).map(|i| ((i * 37 % 101) as f32) / 101.0 - 0.3).collect())
    }

    #[test]
    fn conv_matches_naive_for_each_padding() {
        let x = ramp(9, 8, 3);
        for (k, s, padding) in [
            (3, 1, Padding::Same),
            (3, 2, Padding::Same),
            (7, 2, Padding::Explicit(3)),
            (1, 1, Padding::Valid),
            (1, 2, Padding::Valid),
            (3, 2, Padding::Valid),
        ] {
            let mut st = store();
            let conv = Conv2d::new(&mut st, "c", 3, 5, k, s, padding, false);
            let got = conv.forward(&st, &x);
            let (pt, pb) = padding.amounts(x.h, k, s);
            let (pl, pr) = padding.amounts(x.w, k, s);
            let want = naive_conv(&x, st.get(conv.weight), k, 5, s, (pt, pb, pl, pr));
            assert_eq!(got.shape(), want.shape());
            assert_eq!(got.h, conv.output_size(x.h));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-5, "{k} {s} {padding:?}");
            }
        }
    }

    #[test]
    fn same_padding_puts_extra_on_bottom_right() {
        assert_eq!(Padding::Same.amounts(128, 3, 2), (0, 1));
        assert_eq!(Padding::Same.amounts(32, 3, 1), (1, 1));
        assert_eq!(Padding::Same.output_size(128, 3, 2), 64);
        assert_eq!(Padding::Explicit(3).output_size(128, 7, 2), 64);
    }

    #[test]
    fn depthwise_matches_per_channel_conv() {
        let x = ramp(6, 6, 4);
        let mut st = store();
        let dw = DepthwiseConv2d::new(&mut st, "dw", 4, 3, 2, Padding::Same);
        let got = dw.forward(&st, &x);
        let w = st.get(dw.weight).to_vec();
        for ch in 0..4 {
            let xc = FeatureMap::new(6, 6, 1, x.data.iter().skip(ch).step_by(4).copied().collect());
            let wc: Vec<f32> = w.iter().skip(ch).step_by(4).copied().collect();
            let want = naive_conv(&xc, &wc, 3, 1, 2, (0, 1, 0, 1));
            for (i, v) in want.data.iter().enumerate() {
                assert!((got.data[i * 4 + ch] - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pooling_and_concat() {
        let x = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.max_pool(2, 2).data, vec![4.0]);
        assert_eq!(x.avg_pool(2, 2).data, vec![2.5]);
        let y = FeatureMap::new(2, 2, 1, vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(x.concat(&y).data, vec![1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0]);
        assert_eq!(x.zero_pad(1, 0, 0, 1).data, vec![0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 0.0]);
    }

    #[test]
    fn fresh_batch_norm_is_near_identity() {
        let mut st = store();
        let bn = BatchNorm::new(&mut st, "bn", 2, 1e-3);
        let x = FeatureMap::new(1, 1, 2, vec![2.0, -4.0]);
        let y = bn.forward(&st, x);
        let s = 1.0 / (1.0f32 + 1e-3).sqrt();
        assert_eq!(y.data, vec![2.0 * s, -4.0 * s]);
        assert_eq!(st.num_parameters(), 8);
    }
}
