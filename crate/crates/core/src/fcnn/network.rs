//! Two-branch fully convolutional network.
//!
//! The front branch turns a large input into feature maps the size of the
//! small input; both are stacked channel-wise and passed through the trunk,
//! which ends in a 1x1 convolution emitting one score plane per class. All
//! layers are stride 1 and unpadded, so running the network on a zero-padded
//! slice gives the same scores as running it patch by patch.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{conv_backward, conv_valid, max_pool_backward, max_pool_with_argmax, ConvLayer, Layer, LayerSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::{Axis, SliceTensor, NUM_CLASSES};

const MODEL_FORMAT: &str = "FCNN1";

/// Centre and scale bringing normalized intensities (0 to 255) to
/// roughly zero mean and unit spread.
pub const DEFAULT_INPUT_OFFSET: f64 = 100.0;
pub const DEFAULT_INPUT_SCALE: f64 = 1.0 / 64.0;

/// Reference architecture knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Side of every max-pooling window.
    pub pool: usize,
    pub in_channels: usize,
    /// Channel count of every hidden convolution.
    pub width: usize,
    /// Inputs enter the network as `(x - input_offset) * input_scale`.
    pub input_offset: f64,
    pub input_scale: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            pool: 5,
            in_channels: 3,
            width: 64,
            input_offset: DEFAULT_INPUT_OFFSET,
            input_scale: DEFAULT_INPUT_SCALE,
        }
    }
}

impl Architecture {
    /// Three `[conv3, conv3, pool]` blocks followed by four conv3 layers:
    /// a side reduction of `17 + 3n`.
    fn segment(&self, in_channels: usize) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut c = in_channels;
        for _ in 0..3 {
            for _ in 0..2 {
                layers.push(LayerSpec::Conv {
                    in_channels: c,
                    out_channels: self.width,
                    kernel: 3,
                    relu: true,
                });
                c = self.width;
            }
            layers.push(LayerSpec::Pool { size: self.pool });
        }
        for _ in 0..4 {
            layers.push(LayerSpec::Conv {
                in_channels: c,
                out_channels: self.width,
                kernel: 3,
                relu: true,
            });
        }
        layers
    }

    pub fn front_specs(&self) -> Vec<LayerSpec> {
        self.segment(self.in_channels)
    }

    pub fn trunk_specs(&self) -> Vec<LayerSpec> {
        let mut layers = self.segment(self.in_channels + self.width);
        layers.push(LayerSpec::Conv {
            in_channels: self.width,
            out_channels: NUM_CLASSES,
            kernel: 1,
            relu: false,
        });
        layers
    }
}

/// Per-class score planes and their per-pixel softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMaps {
    pub height: usize,
    pub width: usize,
    /// `[class][row][col]`.
    pub scores: Vec<f64>,
    /// `[class][row][col]`, summing to one over classes at every pixel.
    pub probabilities: Vec<f64>,
}

impl ProbabilityMaps {
    pub fn from_scores(scores: Tensor) -> Self {
        let probabilities = softmax_planes(&scores.data, scores.channels, scores.plane());
        ProbabilityMaps {
            height: scores.height,
            width: scores.width,
            scores: scores.data,
            probabilities,
        }
    }

    pub fn classes(&self) -> usize {
        self.scores.len() / (self.height * self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Probability vector of pixel `(row, col)`.
    pub fn probability_at(&self, row: usize, col: usize) -> Vec<f64> {
        let p = self.pixels();
        let i = row * self.width + col;
        (0..self.classes()).map(|u| self.probabilities[u * p + i]).collect()
    }
}

/// Softmax over `classes` planes of `plane` pixels each.
pub fn softmax_planes(scores: &[f64], classes: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    for i in 0..plane {
        let max = (0..classes).map(|u| scores[u * plane + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for u in 0..classes {
            let e = (scores[u * plane + i] - max).exp();
            out[u * plane + i] = e;
            total += e;
        }
        for u in 0..classes {
            out[u * plane + i] /= total;
        }
    }
    out
}

/// Gradient slots for one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for every convolution, front branch first.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ConvGrad>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParameters) -> Self {
        Gradients {
            layers: params
                .convs()
                .map(|c| ConvGrad {
                    weights: vec![0.0; c.weights.len()],
                    bias: vec![0.0; c.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= s);
            l.bias.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Flat view in the same order as [`NetworkParameters::param`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug)]
struct BranchTrace {
    /// `acts[0]` is the branch input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Tensor>,
    argmax: Vec<Option<Vec<u32>>>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    front: BranchTrace,
    trunk: BranchTrace,
}

impl ForwardTrace {
    pub fn scores(&self) -> &Tensor {
        self.trunk.acts.last().expect("trunk has layers")
    }

    /// Fingerprint of every rectifier mask and pooling choice; equal
    /// fingerprints mean the network is locally linear between the two points.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = Fnv::new();
        for branch in [&self.front, &self.trunk] {
            for act in &branch.acts {
                for v in &act.data {
                    h.write_u8((*v > 0.0) as u8);
                }
            }
            for arg in branch.argmax.iter().flatten() {
                for a in arg {
                    h.write_u64(*a as u64);
                }
            }
        }
        h.finish()
    }
}

/// All convolution weights of the two-branch network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParameters {
    pub pool: usize,
    pub in_channels: usize,
    pub seed: u64,
    /// Viewing direction the network was trained for.
    pub axis: Option<Axis>,
    /// Both inputs enter as `(x - input_offset) * input_scale`.
    pub input_offset: f64,
    pub input_scale: f64,
    front: Vec<Layer>,
    trunk: Vec<Layer>,
}

impl NetworkParameters {
    /// Reference architecture with He-initialized weights and zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.pool == 0 || arch.pool % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "pool size must be odd and positive, got {}",
                arch.pool
            )));
        }
        if arch.width == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        if !(arch.input_scale > 0.0) || !arch.input_scale.is_finite() || !arch.input_offset.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bad input transform: offset {}, scale {}",
                arch.input_offset, arch.input_scale
            )));
        }
        let mut params = Self::from_specs(&arch.front_specs(), &arch.trunk_specs(), arch.in_channels, arch.pool, seed)?;
        params.input_offset = arch.input_offset;
        params.input_scale = arch.input_scale;
        params.initialize(seed);
        Ok(params)
    }

    /// Zero-weight network from explicit layer lists.
    pub fn from_specs(front: &[LayerSpec], trunk: &[LayerSpec], in_channels: usize, pool: usize, seed: u64) -> Result<Self> {
        let front = front.iter().map(|s| Layer::from_spec(*s)).collect::<Result<Vec<_>>>()?;
        let trunk = trunk.iter().map(|s| Layer::from_spec(*s)).collect::<Result<Vec<_>>>()?;
        let params = NetworkParameters {
            pool,
            in_channels,
            seed,
            axis: None,
            input_offset: 0.0,
            input_scale: 1.0,
            front,
            trunk,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.in_channels) {
            return Err(Error::InvalidArgument(format!("unsupported input channel count {}", self.in_channels)));
        }
        let chain = |layers: &[Layer], mut c: usize, what: &str| -> Result<usize> {
            for l in layers {
                if let Layer::Conv(conv) = l {
                    if conv.in_channels != c {
                        return Err(Error::InvalidArgument(format!(
                            "{what}: layer expects {} channels, receives {c}",
                            conv.in_channels
                        )));
                    }
                    c = conv.out_channels;
                }
            }
            Ok(c)
        };
        if !self.front.iter().any(|l| matches!(l, Layer::Conv(_))) {
            return Err(Error::InvalidArgument("front branch needs a convolution".into()));
        }
        let features = chain(&self.front, self.in_channels, "front branch")?;
        let out = chain(&self.trunk, self.in_channels + features, "trunk")?;
        match self.trunk.last() {
            Some(Layer::Conv(c)) if !c.relu && out == NUM_CLASSES => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "trunk must end in a linear convolution with {NUM_CLASSES} outputs"
                )))
            }
        }
        if self.front_reduction() % 2 != 0 || self.trunk_reduction() % 2 != 0 {
            return Err(Error::InvalidArgument(
                "branch reductions must be even so padding splits symmetrically".into(),
            ));
        }
        Ok(())
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in self.convs_mut() {
            let std = (2.0 / conv.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for w in &mut conv.weights {
                *w = normal.sample(&mut rng);
            }
            conv.bias.fill(0.0);
        }
    }

    pub fn front_layers(&self) -> &[Layer] {
        &self.front
    }

    pub fn trunk_layers(&self) -> &[Layer] {
        &self.trunk
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvLayer> {
        self.front.iter().chain(&self.trunk).filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            Layer::Pool(_) => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.front.iter_mut().chain(self.trunk.iter_mut()).filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            Layer::Pool(_) => None,
        })
    }

    pub fn front_reduction(&self) -> usize {
        self.front.iter().map(Layer::reduction).sum()
    }

    pub fn trunk_reduction(&self) -> usize {
        self.trunk.iter().map(Layer::reduction).sum()
    }

    /// Side of the small training patch (trunk output is then 1x1).
    pub fn small_patch(&self) -> usize {
        self.trunk_reduction() + 1
    }

    /// Side of the large training patch.
    pub fn large_patch(&self) -> usize {
        self.small_patch() + self.front_reduction()
    }

    /// Zero padding per side applied to a slice for the small path.
    pub fn small_pad(&self) -> usize {
        self.trunk_reduction() / 2
    }

    /// Zero padding per side applied to a slice for the large path.
    pub fn large_pad(&self) -> usize {
        (self.trunk_reduction() + self.front_reduction()) / 2
    }

    pub fn param_count(&self) -> usize {
        self.convs().map(ConvLayer::param_count).sum()
    }

    fn locate(&self, mut i: usize) -> (usize, bool, usize) {
        for (li, c) in self.convs().enumerate() {
            if i < c.weights.len() {
                return (li, false, i);
            }
            i -= c.weights.len();
            if i < c.bias.len() {
                return (li, true, i);
            }
            i -= c.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access: per convolution, weights then bias.
    pub fn param(&self, i: usize) -> f64 {
        let (li, is_bias, j) = self.locate(i);
        let c = self.convs().nth(li).expect("located layer");
        if is_bias {
            c.bias[j]
        } else {
            c.weights[j]
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let (li, is_bias, j) = self.locate(i);
        let c = self.convs_mut().nth(li).expect("located layer");
        if is_bias {
            c.bias[j] = v;
        } else {
            c.weights[j] = v;
        }
    }

    /// `params += scale * grads`.
    pub fn apply(&mut self, grads: &Gradients, scale: f64) {
        for (c, g) in self.convs_mut().zip(&grads.layers) {
            c.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w += scale * d);
            c.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b += scale * d);
        }
    }

    /// Rounds every parameter to single precision, the on-disk resolution.
    pub fn round_to_f32(&mut self) {
        for c in self.convs_mut() {
            c.weights.iter_mut().for_each(|w| *w = *w as f32 as f64);
            c.bias.iter_mut().for_each(|b| *b = *b as f32 as f64);
        }
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for c in self.convs() {
            for v in c.weights.iter().chain(&c.bias) {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    fn run_branch(layers: &[Layer], input: Tensor) -> Result<BranchTrace> {
        let mut acts = Vec::with_capacity(layers.len() + 1);
        let mut argmax = Vec::with_capacity(layers.len());
        acts.push(input);
        for layer in layers {
            let x = acts.last().expect("input pushed");
            match layer {
                Layer::Conv(c) => {
                    let y = conv_valid(x, c)?;
                    acts.push(y);
                    argmax.push(None);
                }
                Layer::Pool(1) => {
                    let y = x.clone();
                    acts.push(y);
                    argmax.push(None);
                }
                Layer::Pool(n) => {
                    let (y, arg) = max_pool_with_argmax(x, *n)?;
                    acts.push(y);
                    argmax.push(Some(arg));
                }
            }
        }
        Ok(BranchTrace { acts, argmax })
    }

    /// Forward pass recording every activation.
    pub fn forward_trace(&self, small: &Tensor, large: &Tensor) -> Result<ForwardTrace> {
        for t in [small, large] {
            if t.channels != self.in_channels {
                return Err(Error::DimMismatch(format!(
                    "network expects {} input channels, got {}",
                    self.in_channels, t.channels
                )));
            }
        }
        let scaled = |t: &Tensor| {
            let mut t = t.clone();
            if self.input_offset != 0.0 || self.input_scale != 1.0 {
                t.data.iter_mut().for_each(|v| *v = (*v - self.input_offset) * self.input_scale);
            }
            t
        };
        let small = &scaled(small);
        let front = Self::run_branch(&self.front, scaled(large))?;
        let features = front.acts.last().expect("front output");
        if features.height != small.height || features.width != small.width {
            return Err(Error::DimMismatch(format!(
                "front branch yields {}x{} features but the small input is {}x{}",
                features.height, features.width, small.height, small.width
            )));
        }
        let stacked = small.concat_channels(features)?;
        let trunk = Self::run_branch(&self.trunk, stacked)?;
        Ok(ForwardTrace { front, trunk })
    }

    /// Class scores and softmax probabilities.
    pub fn forward(&self, small: &Tensor, large: &Tensor) -> Result<ProbabilityMaps> {
        let mut trace = self.forward_trace(small, large)?;
        let scores = trace.trunk.acts.pop().expect("trunk output");
        Ok(ProbabilityMaps::from_scores(scores))
    }

    fn backward_branch(
        layers: &[Layer],
        trace: &BranchTrace,
        mut grad: Tensor,
        grads: &mut [ConvGrad],
        want_input_grad: bool,
    ) -> Option<Tensor> {
        let mut conv_index = grads.len();
        for (i, layer) in layers.iter().enumerate().rev() {
            let first = i == 0;
            match layer {
                Layer::Conv(c) => {
                    conv_index -= 1;
                    let g = &mut grads[conv_index];
                    let need = !first || want_input_grad;
                    match conv_backward(&trace.acts[i], &trace.acts[i + 1], c, &grad, &mut g.weights, &mut g.bias, need) {
                        Some(dx) => grad = dx,
                        None => return None,
                    }
                }
                Layer::Pool(1) => {}
                Layer::Pool(_) => {
                    let arg = trace.argmax[i].as_ref().expect("pool argmax recorded");
                    grad = max_pool_backward(&trace.acts[i], arg, &grad);
                }
            }
        }
        Some(grad)
    }

    /// Accumulates parameter gradients for `dscores` (gradient of the loss
    /// with respect to the trunk output) into `grads`.
    pub fn backward(&self, trace: &ForwardTrace, dscores: &Tensor, grads: &mut Gradients) {
        let front_convs = self.front.iter().filter(|l| matches!(l, Layer::Conv(_))).count();
        let (front_grads, trunk_grads) = grads.layers.split_at_mut(front_convs);
        let dstacked = Self::backward_branch(&self.trunk, &trace.trunk, dscores.clone(), trunk_grads, true)
            .expect("input gradient requested");
        // Drop the small-input channels; the rest flows into the front branch.
        let skip = self.in_channels * dstacked.plane();
        let features = trace.front.acts.last().expect("front output");
        let dfeatures = Tensor {
            channels: features.channels,
            height: features.height,
            width: features.width,
            data: dstacked.data[skip..].to_vec(),
        };
        Self::backward_branch(&self.front, &trace.front, dfeatures, front_grads, false);
    }

    /// Zero-padded small and large inputs for dense inference on a slice.
    pub fn slice_inputs(&self, slice: &SliceTensor) -> Result<(Tensor, Tensor)> {
        if slice.channels != self.in_channels {
            return Err(Error::DimMismatch(format!(
                "network expects {} channels, slice has {}",
                self.in_channels, slice.channels
            )));
        }
        let t = Tensor::from_vec(
            slice.channels,
            slice.height,
            slice.width,
            slice.data.iter().map(|&v| v as f64).collect(),
        )?;
        Ok((t.pad(self.small_pad()), t.pad(self.large_pad())))
    }

    /// Dense per-pixel class probabilities for a whole slice.
    pub fn segment_slice(&self, slice: &SliceTensor) -> Result<ProbabilityMaps> {
        let (small, large) = self.slice_inputs(slice)?;
        self.forward(&small, &large)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            format: MODEL_FORMAT.to_string(),
            pool: self.pool,
            in_channels: self.in_channels,
            classes: NUM_CLASSES,
            seed: self.seed,
            axis: self.axis,
            input_offset: self.input_offset,
            input_scale: self.input_scale,
            front: self.front.iter().map(Layer::spec).collect(),
            trunk: self.trunk.iter().map(Layer::spec).collect(),
        };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        for c in self.convs() {
            for v in c.weights.iter().chain(&c.bias) {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Header("missing model header terminator".into()))?;
        let header: ModelHeader =
            serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::Header(e.to_string()))?;
        if header.format != MODEL_FORMAT || header.classes != NUM_CLASSES {
            return Err(Error::Header(format!("unsupported model format {:?}", header.format)));
        }
        let mut params = Self::from_specs(&header.front, &header.trunk, header.in_channels, header.pool, header.seed)?;
        params.axis = header.axis;
        if !(header.input_scale > 0.0) || !header.input_scale.is_finite() || !header.input_offset.is_finite() {
            return Err(Error::Header(format!(
                "bad input transform: offset {}, scale {}",
                header.input_offset, header.input_scale
            )));
        }
        params.input_offset = header.input_offset;
        params.input_scale = header.input_scale;
        let payload = &bytes[newline + 1..];
        let expected = params.param_count() * 4;
        if payload.len() != expected {
            return Err(Error::PayloadLength {
                expected,
                found: payload.len(),
            });
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        for c in params.convs_mut() {
            for v in c.weights.iter_mut().chain(c.bias.iter_mut()) {
                *v = values.next().expect("length checked");
            }
        }
        if let Some(offset) = (0..params.param_count()).position(|i| !params.param(i).is_finite()) {
            return Err(Error::NonFinite(offset));
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    pool: usize,
    in_channels: usize,
    classes: usize,
    seed: u64,
    axis: Option<Axis>,
    #[serde(default)]
    input_offset: f64,
    #[serde(default = "unit_scale")]
    input_scale: f64,
    front: Vec<LayerSpec>,
    trunk: Vec<LayerSpec>,
}

fn unit_scale() -> f64 {
    1.0
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write_u8(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
    }

    pub(crate) fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.write_u8(b);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(pool: usize, width: usize) -> Architecture {
        Architecture {
            pool,
            in_channels: 3,
            width,
            input_offset: 3.0,
            input_scale: 0.5,
        }
    }

    #[test]
    fn patch_sizes_follow_pool_size() {
        for (n, s, l) in [(1, 21, 41), (3, 27, 53), (5, 33, 65)] {
            let p = NetworkParameters::new(arch(n, 2), 0).unwrap();
            assert_eq!(p.front_reduction(), 17 + 3 * n);
            assert_eq!(p.trunk_reduction(), 17 + 3 * n);
            assert_eq!((p.small_patch(), p.large_patch()), (s, l));
            assert_eq!(p.large_patch(), 2 * p.small_patch() - 1);
        }
    }

    #[test]
    fn patch_mode_output_is_one_pixel() {
        let p = NetworkParameters::new(arch(5, 2), 0).unwrap();
        let out = p.forward(&Tensor::zeros(3, 33, 33), &Tensor::zeros(3, 65, 65)).unwrap();
        assert_eq!((out.height, out.width, out.classes()), (1, 1, 5));
    }

    #[test]
    fn slice_padding_for_240() {
        let p = NetworkParameters::new(arch(5, 1), 0).unwrap();
        assert_eq!(240 + 2 * p.small_pad(), 272);
        assert_eq!(240 + 2 * p.large_pad(), 304);
    }

    #[test]
    fn even_pool_is_rejected() {
        assert!(NetworkParameters::new(arch(2, 4), 0).is_err());
    }

    #[test]
    fn mismatched_inputs() {
        let p = NetworkParameters::new(arch(1, 2), 0).unwrap();
        let err = p.forward(&Tensor::zeros(3, 21, 21), &Tensor::zeros(3, 43, 43)).unwrap_err();
        assert!(matches!(err, Error::DimMismatch(_)));
    }

    #[test]
    fn model_round_trip() {
        let mut p = NetworkParameters::new(arch(3, 4), 11).unwrap();
        p.axis = Some(Axis::Coronal);
        p.round_to_f32();
        let bytes = p.to_bytes().unwrap();
        let q = NetworkParameters::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());
        assert!(NetworkParameters::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
