//! Composite blocks: visual attention condensers (VAC), anti-aliased
//! downsampling (AADS) blocks, plain convolutions, pooling, merges and the
//! dual softmax classification head.
//!
//! Each [`BlockSpec`] knows its parameter shapes, its output shape, its
//! analytic cost, and how to run forward and backward given its parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, Real, Tensor};

/// Activation shape of a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn elements(&self) -> u64 {
        match *self {
            Shape::Map { c, h, w } => (c * h * w) as u64,
            Shape::Flat(f) => f as u64,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            Shape::Map { c, .. } => c,
            Shape::Flat(f) => f,
        }
    }

    fn map(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self {
            Shape::Map { c, h, w } => Ok((c, h, w)),
            Shape::Flat(_) => Err(Error::shape(op, "input", "feature map", "flat features")),
        }
    }

    fn flat(&self, op: &'static str) -> Result<usize> {
        match *self {
            Shape::Flat(f) => Ok(f),
            Shape::Map { .. } => Err(Error::shape(op, "input", "flat features", "feature map")),
        }
    }

    /// Batched tensor shape for this per-sample shape.
    pub fn batched(&self, n: usize) -> Vec<usize> {
        match *self {
            Shape::Map { c, h, w } => vec![n, c, h, w],
            Shape::Flat(f) => vec![n, f],
        }
    }
}

/// Attention condenser geometry.
///
/// The block condenses its input with a `condense_stride` max-pool, embeds
/// the condensed map with two grouped 3x3 convolutions (ReLU), projects back
/// to `channels` with a pointwise convolution, expands by nearest-neighbour
/// upsampling and gates the input: `out = v * sigmoid(A)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VacSpec {
    pub channels: usize,
    pub condense_stride: usize,
    pub embed_groups: usize,
    pub embed_channels: usize,
}

impl VacSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.embed_channels == 0 || self.embed_groups == 0 {
            return Err(Error::invalid("vac", "channel counts and groups must be positive"));
        }
        if self.condense_stride < 2 {
            return Err(Error::invalid(
                "vac",
                format!("condense_stride must be >= 2, got {}", self.condense_stride),
            ));
        }
        if self.channels % self.embed_groups != 0 || self.embed_channels % self.embed_groups != 0 {
            return Err(Error::invalid(
                "vac",
                format!(
                    "embed_groups {} must divide channels {} and embed_channels {}",
                    self.embed_groups, self.channels, self.embed_channels
                ),
            ));
        }
        Ok(())
    }

    fn embed1(&self) -> ConvSpec {
        ConvSpec::same(self.channels, self.embed_channels, 3, self.embed_groups)
    }

    fn embed2(&self) -> ConvSpec {
        ConvSpec::same(self.embed_channels, self.embed_channels, 3, self.embed_groups)
    }

    fn project(&self) -> ConvSpec {
        ConvSpec::same(self.embed_channels, self.channels, 1, 1)
    }
}

/// One node of an architecture graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    /// Graph input; the only node without predecessors.
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        groups: usize,
        relu: bool,
    },
    ConvDepthwise {
        channels: usize,
        stride: usize,
        relu: bool,
    },
    /// Pointwise convolution. The stride is carried so that strided
    /// pointwise layers are representable (and rejectable).
    Conv1x1 {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        relu: bool,
    },
    Vac(VacSpec),
    /// Optional stride-1 3x3 conv + ReLU, then a stride-2 binomial blur pool.
    AadsDown {
        in_channels: usize,
        out_channels: usize,
        conv: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    /// Channel concatenation of all inputs.
    Concat,
    /// Elementwise sum of all inputs.
    Add,
    Gap,
    /// Fully connected layer followed by softmax.
    FcHead {
        in_features: usize,
        classes: usize,
    },
    /// Unweighted mean of the head distributions.
    Aggregate,
    /// Per-channel batch normalization with a learned scale and shift.
    /// Running statistics are stored after the two trainable tensors.
    BatchNorm {
        channels: usize,
        #[serde(default)]
        relu: bool,
    },
    /// Per-sample normalization over channel groups with a learned
    /// per-channel scale and shift.
    GroupNorm {
        channels: usize,
        groups: usize,
        #[serde(default)]
        relu: bool,
    },
}

/// Whether normalization blocks use batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

impl BlockSpec {
    pub fn name(&self) -> &'static str {
        match self {
            BlockSpec::Input { .. } => "input",
            BlockSpec::Conv3x3 { .. } => "conv3x3",
            BlockSpec::ConvDepthwise { .. } => "conv_dw",
            BlockSpec::Conv1x1 { .. } => "conv1x1",
            BlockSpec::Vac(_) => "vac",
            BlockSpec::AadsDown { .. } => "aads_down",
            BlockSpec::MaxPool { .. } => "max_pool",
            BlockSpec::Concat => "concat",
            BlockSpec::Add => "add",
            BlockSpec::Gap => "gap",
            BlockSpec::FcHead { .. } => "fc_head",
            BlockSpec::Aggregate => "aggregate",
            BlockSpec::BatchNorm { .. } => "batch_norm",
            BlockSpec::GroupNorm { .. } => "group_norm",
        }
    }

    /// The convolution this block applies directly (not VAC internals).
    pub fn conv_spec(&self) -> Option<ConvSpec> {
        match *self {
            BlockSpec::Conv3x3 {
                in_channels,
                out_channels,
                stride,
                groups,
                ..
            } => Some(ConvSpec {
                stride,
                ..ConvSpec::same(in_channels, out_channels, 3, groups)
            }),
            BlockSpec::ConvDepthwise {
                channels, stride, ..
            } => Some(ConvSpec {
                stride,
                ..ConvSpec::same(channels, channels, 3, channels)
            }),
            BlockSpec::Conv1x1 {
                in_channels,
                out_channels,
                stride,
                ..
            } => Some(ConvSpec {
                stride,
                ..ConvSpec::same(in_channels, out_channels, 1, 1)
            }),
            BlockSpec::AadsDown {
                in_channels,
                out_channels,
                conv: true,
            } => Some(ConvSpec::same(in_channels, out_channels, 3, 1)),
            _ => None,
        }
    }

    /// The same block with its trailing ReLU removed, and whether it had one.
    pub fn without_relu(self) -> (Self, bool) {
        match self {
            BlockSpec::Conv3x3 { in_channels, out_channels, stride, groups, relu } => (
                BlockSpec::Conv3x3 { in_channels, out_channels, stride, groups, relu: false },
                relu,
            ),
            BlockSpec::ConvDepthwise { channels, stride, relu } => {
                (BlockSpec::ConvDepthwise { channels, stride, relu: false }, relu)
            }
            BlockSpec::Conv1x1 { in_channels, out_channels, stride, relu } => (
                BlockSpec::Conv1x1 { in_channels, out_channels, stride, relu: false },
                relu,
            ),
            BlockSpec::BatchNorm { channels, relu } => (BlockSpec::BatchNorm { channels, relu: false }, relu),
            BlockSpec::GroupNorm { channels, groups, relu } => {
                (BlockSpec::GroupNorm { channels, groups, relu: false }, relu)
            }
            other => (other, false),
        }
    }

    fn has_relu(&self) -> bool {
        match *self {
            BlockSpec::Conv3x3 { relu, .. }
            | BlockSpec::ConvDepthwise { relu, .. }
            | BlockSpec::Conv1x1 { relu, .. } => relu,
            BlockSpec::AadsDown { conv, .. } => conv,
            BlockSpec::BatchNorm { relu, .. } | BlockSpec::GroupNorm { relu, .. } => relu,
            _ => false,
        }
    }

    /// Spatial stride of the block (1 for shape-preserving blocks).
    pub fn spatial_stride(&self) -> usize {
        match *self {
            BlockSpec::Conv3x3 { stride, .. }
            | BlockSpec::ConvDepthwise { stride, .. }
            | BlockSpec::Conv1x1 { stride, .. }
            | BlockSpec::MaxPool { stride, .. } => stride,
            BlockSpec::AadsDown { .. } => 2,
            _ => 1,
        }
    }

    /// Shapes of the learnable tensors, in storage order. For every weight
    /// tensor the bias immediately follows it.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        if let Some(spec) = self.conv_spec() {
            return vec![spec.weight_shape().to_vec(), vec![spec.out_channels]];
        }
        match *self {
            BlockSpec::Vac(v) => {
                let mut shapes = Vec::with_capacity(6);
                for spec in [v.embed1(), v.embed2(), v.project()] {
                    shapes.push(spec.weight_shape().to_vec());
                    shapes.push(vec![spec.out_channels]);
                }
                shapes
            }
            BlockSpec::FcHead {
                in_features,
                classes,
            } => vec![vec![classes, in_features], vec![classes]],
            BlockSpec::BatchNorm { channels, .. } => vec![vec![channels]; 4],
            BlockSpec::GroupNorm { channels, .. } => vec![vec![channels]; 2],
            _ => Vec::new(),
        }
    }

    /// Number of leading tensors in [`Self::param_shapes`] that are learned;
    /// the rest are running statistics.
    pub fn trainable_tensors(&self) -> usize {
        match self {
            BlockSpec::BatchNorm { .. } => 2,
            _ => self.param_shapes().len(),
        }
    }

    /// Fan-in and whether the tensor feeds a ReLU, for every weight tensor
    /// (biases are `None`).
    pub(crate) fn init_hints(&self) -> Vec<Option<(usize, bool)>> {
        let shapes = self.param_shapes();
        if let BlockSpec::BatchNorm { .. } | BlockSpec::GroupNorm { .. } = self {
            return vec![None; shapes.len()];
        }
        let relu_after: Vec<bool> = match self {
            BlockSpec::Vac(_) => vec![true, true, false],
            _ => vec![self.has_relu()],
        };
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (i % 2 == 0).then(|| (s[1..].iter().product(), relu_after[i / 2]))
            })
            .collect()
    }

    pub fn param_count(&self) -> u64 {
        self.param_shapes()
            .iter()
            .take(self.trainable_tensors())
            .map(|s| s.iter().product::<usize>() as u64)
            .sum()
    }

    pub fn expected_inputs(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            BlockSpec::Input { .. } => 0..=0,
            BlockSpec::Concat | BlockSpec::Add => 1..=usize::MAX,
            BlockSpec::Aggregate => 2..=2,
            _ => 1..=1,
        }
    }

    /// Per-sample output shape given the per-sample input shapes.
    pub fn output_shape(&self, inputs: &[Shape]) -> Result<Shape> {
        let arity = self.expected_inputs();
        if !arity.contains(&inputs.len()) {
            return Err(Error::shape(
                self.name(),
                "input count",
                format!("{arity:?}"),
                inputs.len(),
            ));
        }
        let op = self.name();
        match *self {
            BlockSpec::Input {
                channels,
                height,
                width,
            } => Ok(Shape::Map {
                c: channels,
                h: height,
                w: width,
            }),
            BlockSpec::Conv3x3 { .. }
            | BlockSpec::ConvDepthwise { .. }
            | BlockSpec::Conv1x1 { .. }
            | BlockSpec::AadsDown { conv: true, .. } => {
                let spec = self.conv_spec().expect("conv block");
                spec.validate()?;
                let (c, h, w) = inputs[0].map(op)?;
                if c != spec.in_channels {
                    return Err(Error::shape(op, "input channels", spec.in_channels, c));
                }
                let (oh, ow) = spec.output_hw(h, w)?;
                if let BlockSpec::AadsDown { .. } = self {
                    return Ok(Shape::Map {
                        c: spec.out_channels,
                        h: oh.div_ceil(2),
                        w: ow.div_ceil(2),
                    });
                }
                Ok(Shape::Map {
                    c: spec.out_channels,
                    h: oh,
                    w: ow,
                })
            }
            BlockSpec::AadsDown {
                in_channels,
                out_channels,
                conv: false,
            } => {
                let (c, h, w) = inputs[0].map(op)?;
                if c != in_channels || in_channels != out_channels {
                    return Err(Error::shape(
                        op,
                        "channels (identity downsample)",
                        in_channels,
                        format!("{c} -> {out_channels}"),
                    ));
                }
                Ok(Shape::Map {
                    c,
                    h: h.div_ceil(2),
                    w: w.div_ceil(2),
                })
            }
            BlockSpec::Vac(v) => {
                v.validate()?;
                let (c, h, w) = inputs[0].map(op)?;
                if c != v.channels {
                    return Err(Error::shape(op, "input channels", v.channels, c));
                }
                if h % v.condense_stride != 0 || w % v.condense_stride != 0 {
                    return Err(Error::shape(
                        op,
                        "spatial extent",
                        format!("multiple of condense_stride {}", v.condense_stride),
                        format!("{h}x{w}"),
                    ));
                }
                Ok(inputs[0])
            }
            BlockSpec::MaxPool { kernel, stride } => {
                let (c, h, w) = inputs[0].map(op)?;
                if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                    return Err(Error::shape(
                        op,
                        "spatial extent",
                        format!(">= kernel {kernel}"),
                        format!("{h}x{w}"),
                    ));
                }
                Ok(Shape::Map {
                    c,
                    h: (h - kernel) / stride + 1,
                    w: (w - kernel) / stride + 1,
                })
            }
            BlockSpec::Concat => {
                let (_, h, w) = inputs[0].map(op)?;
                let mut total = 0;
                for s in inputs {
                    let (c, sh, sw) = s.map(op)?;
                    if (sh, sw) != (h, w) {
                        return Err(Error::shape(
                            op,
                            "spatial extent",
                            format!("{h}x{w}"),
                            format!("{sh}x{sw}"),
                        ));
                    }
                    total += c;
                }
                Ok(Shape::Map { c: total, h, w })
            }
            BlockSpec::Add | BlockSpec::Aggregate => {
                for s in &inputs[1..] {
                    if *s != inputs[0] {
                        return Err(Error::shape(
                            op,
                            "operand shape",
                            format!("{:?}", inputs[0]),
                            format!("{s:?}"),
                        ));
                    }
                }
                if let BlockSpec::Aggregate = self {
                    inputs[0].flat(op)?;
                }
                Ok(inputs[0])
            }
            BlockSpec::Gap => {
                let (c, _, _) = inputs[0].map(op)?;
                Ok(Shape::Flat(c))
            }
            BlockSpec::GroupNorm { channels, groups, .. } => {
                if groups == 0 || channels % groups != 0 {
                    return Err(Error::invalid(op, format!("{groups} groups do not divide {channels} channels")));
                }
                if inputs[0].channels() != channels {
                    return Err(Error::shape(op, "channels", channels, inputs[0].channels()));
                }
                Ok(inputs[0])
            }
            BlockSpec::BatchNorm { channels, .. } => {
                if inputs[0].channels() != channels {
                    return Err(Error::shape(op, "channels", channels, inputs[0].channels()));
                }
                Ok(inputs[0])
            }
            BlockSpec::FcHead {
                in_features,
                classes,
            } => {
                let f = inputs[0].flat(op)?;
                if f != in_features {
                    return Err(Error::shape(op, "in_features", in_features, f));
                }
                if classes == 0 {
                    return Err(Error::invalid("fc_head", "empty class axis"));
                }
                Ok(Shape::Flat(classes))
            }
        }
    }

    /// Per-sample floating point operations. One multiply-add counts as two
    /// FLOPs; bias additions are not counted; ReLU, sigmoid, softmax and
    /// elementwise merges cost one FLOP per element; pooling costs one FLOP
    /// per window tap; the blur pool is costed as a 3x3 depthwise conv.
    pub fn flops(&self, inputs: &[Shape], output: Shape) -> u64 {
        let conv_flops = |spec: &ConvSpec, out_hw: u64| {
            2 * out_hw
                * spec.out_channels as u64
                * (spec.in_channels / spec.groups) as u64
                * (spec.kernel_h * spec.kernel_w) as u64
        };
        let hw = |s: Shape| match s {
            Shape::Map { h, w, .. } => (h * w) as u64,
            Shape::Flat(_) => 1,
        };
        match *self {
            BlockSpec::Input { .. } | BlockSpec::Concat => 0,
            BlockSpec::Conv3x3 { .. } | BlockSpec::ConvDepthwise { .. } | BlockSpec::Conv1x1 { .. } => {
                let spec = self.conv_spec().expect("conv block");
                let act = if self.has_relu() { output.elements() } else { 0 };
                conv_flops(&spec, hw(output)) + act
            }
            BlockSpec::AadsDown {
                in_channels,
                out_channels,
                conv,
            } => {
                let blur = 2 * output.elements() * 9;
                if conv {
                    let spec = ConvSpec::same(in_channels, out_channels, 3, 1);
                    let full = inputs[0].elements() / in_channels as u64;
                    conv_flops(&spec, full) + full * out_channels as u64 + blur
                } else {
                    blur
                }
            }
            BlockSpec::Vac(v) => {
                let n = inputs[0].elements();
                let s2 = (v.condense_stride * v.condense_stride) as u64;
                let low_hw = hw(inputs[0]) / s2;
                let pool = n;
                let e1 = conv_flops(&v.embed1(), low_hw) + low_hw * v.embed_channels as u64;
                let e2 = conv_flops(&v.embed2(), low_hw) + low_hw * v.embed_channels as u64;
                let proj = conv_flops(&v.project(), low_hw);
                // sigmoid on the expanded map, then the gating product
                pool + e1 + e2 + proj + 2 * n
            }
            BlockSpec::MaxPool { kernel, .. } => output.elements() * (kernel * kernel) as u64,
            BlockSpec::Add => output.elements() * (inputs.len() as u64 - 1),
            BlockSpec::Gap => inputs[0].elements(),
            BlockSpec::FcHead {
                in_features,
                classes,
            } => 2 * (in_features * classes) as u64 + classes as u64,
            BlockSpec::Aggregate => 2 * output.elements(),
            BlockSpec::BatchNorm { relu, .. } => (2 + relu as u64) * output.elements(),
            // statistics (two passes) plus normalize and affine
            BlockSpec::GroupNorm { relu, .. } => (6 + relu as u64) * output.elements(),
        }
    }

    /// Run the block on a batch.
    pub fn forward<T: Real>(
        &self,
        inputs: &[&Tensor<T>],
        params: &[Tensor<T>],
        mode: Mode,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let x = inputs.first().copied();
        let input = || x.ok_or_else(|| Error::invalid("block", "missing input"));
        match *self {
            BlockSpec::Input { .. } => Err(Error::invalid(
                "input",
                "input nodes are fed, not executed",
            )),
            BlockSpec::Conv3x3 { .. }
            | BlockSpec::ConvDepthwise { .. }
            | BlockSpec::Conv1x1 { .. } => {
                let spec = self.conv_spec().expect("conv block");
                let y = tensor::conv2d_forward(input()?, &params[0], &params[1], &spec)?;
                let y = if self.has_relu() { tensor::relu(&y) } else { y };
                Ok((y, BlockCache::None))
            }
            BlockSpec::AadsDown { conv, .. } => {
                let (y, cache) = aads_down_block(input()?, params, self.conv_spec().filter(|_| conv))?;
                Ok((y, cache.map_or(BlockCache::None, BlockCache::Aads)))
            }
            BlockSpec::Vac(v) => {
                let (y, cache) = vac_forward(input()?, params, &v)?;
                Ok((y, BlockCache::Vac(Box::new(cache))))
            }
            BlockSpec::MaxPool { kernel, stride } => {
                let out = tensor::max_pool(input()?, kernel, stride)?;
                Ok((out.output, BlockCache::Argmax(out.argmax)))
            }
            BlockSpec::Concat => Ok((tensor::concat_channels(inputs)?, BlockCache::None)),
            BlockSpec::Add => {
                let mut acc = input()?.clone();
                for t in &inputs[1..] {
                    acc.add_assign(t)?;
                }
                Ok((acc, BlockCache::None))
            }
            BlockSpec::Gap => Ok((tensor::global_avg_pool(input()?)?, BlockCache::None)),
            BlockSpec::FcHead { .. } => Ok((fc_head_forward(input()?, &params[0], &params[1])?, BlockCache::None)),
            BlockSpec::Aggregate => {
                let p = aggregate(inputs[0], inputs[1])?;
                Ok((p, BlockCache::None))
            }
            BlockSpec::BatchNorm { channels, relu } => {
                expect_params("batch_norm", params, 4)?;
                let act = |y: Tensor<T>| if relu { tensor::relu(&y) } else { y };
                match mode {
                    Mode::Train => {
                        let (y, cache) = batch_norm_train(input()?, &params[0], &params[1], channels)?;
                        Ok((act(y), BlockCache::Norm(Box::new(cache))))
                    }
                    Mode::Eval => Ok((act(batch_norm_eval(input()?, params, channels)?), BlockCache::None)),
                }
            }
            BlockSpec::GroupNorm { channels, groups, relu } => {
                expect_params("group_norm", params, 2)?;
                let (y, cache) = group_norm(input()?, &params[0], &params[1], channels, groups)?;
                let y = if relu { tensor::relu(&y) } else { y };
                Ok((y, BlockCache::Norm(Box::new(cache))))
            }
        }
    }

    /// Backward pass. Returns one gradient per input (`None` where
    /// `need_input` is false for that input) and one per parameter tensor.
    pub fn backward<T: Real>(
        &self,
        inputs: &[&Tensor<T>],
        params: &[Tensor<T>],
        output: &Tensor<T>,
        cache: &BlockCache<T>,
        grad_out: &Tensor<T>,
        need_input: bool,
    ) -> Result<(Vec<Option<Tensor<T>>>, Vec<Tensor<T>>)> {
        match *self {
            BlockSpec::Input { .. } => Ok((Vec::new(), Vec::new())),
            BlockSpec::Conv3x3 { .. }
            | BlockSpec::ConvDepthwise { .. }
            | BlockSpec::Conv1x1 { .. } => {
                let spec = self.conv_spec().expect("conv block");
                let g = if self.has_relu() {
                    tensor::relu_backward(grad_out, output)?
                } else {
                    grad_out.clone()
                };
                let grads = tensor::conv2d_backward_with(&g, inputs[0], &params[0], &spec, need_input)?;
                Ok((vec![grads.input], vec![grads.weights, grads.bias]))
            }
            BlockSpec::AadsDown { conv, .. } => {
                let cached = match cache {
                    BlockCache::Aads(t) => Some(t),
                    _ => None,
                };
                let spec = self.conv_spec().filter(|_| conv);
                aads_down_backward(grad_out, inputs[0], params, spec, cached, need_input)
            }
            BlockSpec::Vac(v) => {
                let BlockCache::Vac(c) = cache else {
                    return Err(Error::invalid("vac", "missing forward cache"));
                };
                let (gi, gp) = vac_backward(grad_out, inputs[0], params, &v, c)?;
                Ok((vec![Some(gi)], gp))
            }
            BlockSpec::MaxPool { .. } => {
                let BlockCache::Argmax(idx) = cache else {
                    return Err(Error::invalid("max_pool", "missing forward cache"));
                };
                let gi = tensor::max_pool_backward(grad_out, idx, inputs[0].shape())?;
                Ok((vec![Some(gi)], Vec::new()))
            }
            BlockSpec::Concat => {
                let sizes: Vec<usize> = inputs.iter().map(|t| t.shape()[1]).collect();
                let parts = tensor::split_channels(grad_out, &sizes)?;
                Ok((parts.into_iter().map(Some).collect(), Vec::new()))
            }
            BlockSpec::Add => Ok((inputs.iter().map(|_| Some(grad_out.clone())).collect(), Vec::new())),
            BlockSpec::Gap => {
                let gi = tensor::global_avg_pool_backward(grad_out, inputs[0].shape())?;
                Ok((vec![Some(gi)], Vec::new()))
            }
            BlockSpec::FcHead { .. } => {
                let g = fc_head_backward(grad_out, inputs[0], &params[0], output)?;
                Ok((vec![Some(g.input)], vec![g.weights, g.bias]))
            }
            BlockSpec::Aggregate => {
                let half = grad_out.scale(T::from_f64(0.5));
                Ok((vec![Some(half.clone()), Some(half)], Vec::new()))
            }
            BlockSpec::BatchNorm { channels, relu } => {
                let BlockCache::Norm(c) = cache else {
                    return Err(Error::invalid("batch_norm", "backward needs a training-mode cache"));
                };
                let g = if relu {
                    tensor::relu_backward(grad_out, output)?
                } else {
                    grad_out.clone()
                };
                let (gi, gg, gb) = batch_norm_backward(&g, &params[0], c, channels)?;
                let stats = vec![Tensor::zeros([channels]), Tensor::zeros([channels])];
                Ok((vec![Some(gi)], [vec![gg, gb], stats].concat()))
            }
            BlockSpec::GroupNorm { channels, groups, relu } => {
                let BlockCache::Norm(c) = cache else {
                    return Err(Error::invalid("group_norm", "missing forward cache"));
                };
                let g = if relu {
                    tensor::relu_backward(grad_out, output)?
                } else {
                    grad_out.clone()
                };
                let (gi, gg, gb) = group_norm_backward(&g, &params[0], c, channels, groups)?;
                Ok((vec![Some(gi)], vec![gg, gb]))
            }
        }
    }
}

/// Intermediate values a block keeps from forward for its backward pass.
#[derive(Debug, Clone)]
pub enum BlockCache<T: Real> {
    None,
    /// Post-ReLU output of the AADS block's convolution.
    Aads(Tensor<T>),
    Argmax(Vec<u32>),
    Vac(Box<VacCache<T>>),
    Norm(Box<NormCache<T>>),
}

/// Batch statistics of a training-mode normalization.
#[derive(Debug, Clone)]
pub struct NormCache<T: Real> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
    /// Per-channel batch mean and unbiased variance.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VacCache<T: Real> {
    pooled: Tensor<T>,
    argmax: Vec<u32>,
    h1: Tensor<T>,
    h2: Tensor<T>,
    gate: Tensor<T>,
}

fn expect_params<T: Real>(op: &'static str, params: &[Tensor<T>], n: usize) -> Result<()> {
    if params.len() != n {
        return Err(Error::shape(op, "parameter tensor count", n, params.len()));
    }
    Ok(())
}

/// Attention condenser forward: `v * sigmoid(upsample(project(embed(maxpool(v)))))`.
///
/// `params` holds, in order, embed-1 weight/bias, embed-2 weight/bias and
/// projection weight/bias. The projection is applied before upsampling; for
/// a pointwise conv the two orders give identical results.
pub fn vac_forward<T: Real>(
    v: &Tensor<T>,
    params: &[Tensor<T>],
    spec: &VacSpec,
) -> Result<(Tensor<T>, VacCache<T>)> {
    spec.validate()?;
    expect_params("vac", params, 6)?;
    let (_, c, h, w) = v.dims4("vac")?;
    if c != spec.channels {
        return Err(Error::shape("vac", "input channels", spec.channels, c));
    }
    let s = spec.condense_stride;
    if h % s != 0 || w % s != 0 {
        return Err(Error::shape(
            "vac",
            "spatial extent",
            format!("multiple of condense_stride {s}"),
            format!("{h}x{w}"),
        ));
    }
    let pooled = tensor::max_pool(v, s, s)?;
    let h1 = tensor::relu(&tensor::conv2d_forward(&pooled.output, &params[0], &params[1], &spec.embed1())?);
    let h2 = tensor::relu(&tensor::conv2d_forward(&h1, &params[2], &params[3], &spec.embed2())?);
    let low = tensor::conv2d_forward(&h2, &params[4], &params[5], &spec.project())?;
    let gate = tensor::sigmoid(&tensor::nearest_upsample(&low, s)?);
    let out = tensor::mul(v, &gate)?;
    Ok((
        out,
        VacCache {
            pooled: pooled.output,
            argmax: pooled.argmax,
            h1,
            h2,
            gate,
        },
    ))
}

pub fn vac_backward<T: Real>(
    grad_out: &Tensor<T>,
    v: &Tensor<T>,
    params: &[Tensor<T>],
    spec: &VacSpec,
    cache: &VacCache<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    expect_params("vac", params, 6)?;
    let s = spec.condense_stride;
    let mut grad_v = tensor::mul(grad_out, &cache.gate)?;
    let grad_gate = tensor::mul(grad_out, v)?;
    let grad_a = tensor::sigmoid_backward(&grad_gate, &cache.gate)?;
    let grad_low = tensor::nearest_upsample_backward(&grad_a, s)?;
    let proj = tensor::conv2d_backward(&grad_low, &cache.h2, &params[4], &spec.project())?;
    let g2 = tensor::relu_backward(&proj.input.expect("input grad requested"), &cache.h2)?;
    let e2 = tensor::conv2d_backward(&g2, &cache.h1, &params[2], &spec.embed2())?;
    let g1 = tensor::relu_backward(&e2.input.expect("input grad requested"), &cache.h1)?;
    let e1 = tensor::conv2d_backward(&g1, &cache.pooled, &params[0], &spec.embed1())?;
    let grad_pool = tensor::max_pool_backward(
        &e1.input.expect("input grad requested"),
        &cache.argmax,
        v.shape(),
    )?;
    grad_v.add_assign(&grad_pool)?;
    Ok((
        grad_v,
        vec![e1.weights, e1.bias, e2.weights, e2.bias, proj.weights, proj.bias],
    ))
}

/// AADS downsample block: optional stride-1 conv + ReLU, then blur pool with
/// stride 2. Returns the post-ReLU conv output as cache when a conv is used.
pub fn aads_down_block<T: Real>(
    v: &Tensor<T>,
    params: &[Tensor<T>],
    conv: Option<ConvSpec>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    match conv {
        Some(spec) => {
            expect_params("aads_down", params, 2)?;
            let c = tensor::relu(&tensor::conv2d_forward(v, &params[0], &params[1], &spec)?);
            let y = tensor::blur_pool(&c, 2)?;
            Ok((y, Some(c)))
        }
        None => {
            expect_params("aads_down", params, 0)?;
            Ok((tensor::blur_pool(v, 2)?, None))
        }
    }
}

#[allow(clippy::type_complexity)]
fn aads_down_backward<T: Real>(
    grad_out: &Tensor<T>,
    v: &Tensor<T>,
    params: &[Tensor<T>],
    conv: Option<ConvSpec>,
    conv_out: Option<&Tensor<T>>,
    need_input: bool,
) -> Result<(Vec<Option<Tensor<T>>>, Vec<Tensor<T>>)> {
    match (conv, conv_out) {
        (Some(spec), Some(c)) => {
            let gc = tensor::blur_pool_backward(grad_out, c.shape(), 2)?;
            let gc = tensor::relu_backward(&gc, c)?;
            let grads = tensor::conv2d_backward_with(&gc, v, &params[0], &spec, need_input)?;
            Ok((vec![grads.input], vec![grads.weights, grads.bias]))
        }
        (None, _) => {
            let gi = tensor::blur_pool_backward(grad_out, v.shape(), 2)?;
            Ok((vec![Some(gi)], Vec::new()))
        }
        (Some(_), None) => Err(Error::invalid("aads_down", "missing forward cache")),
    }
}

impl<T: Real> NormCache<T> {
    /// Number of values pooled into each statistic.
    pub fn per_stat(&self) -> usize {
        self.xhat.len() / self.mean.len().max(1)
    }
}

/// Positions per channel per sample of a normalization input.
fn norm_layout<T: Real>(x: &Tensor<T>, channels: usize) -> Result<usize> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != channels {
        return Err(Error::shape("norm", "channels", channels, shape.get(1).copied().unwrap_or(0)));
    }
    Ok(shape[2..].iter().product())
}

/// Which statistics a normalization pools over.
#[derive(Debug, Clone, Copy)]
enum Pooling {
    /// One statistic per channel, over the batch and all positions.
    Batch,
    /// One statistic per sample and group of consecutive channels.
    Groups(usize),
}

impl Pooling {
    fn count(self, n: usize, channels: usize) -> usize {
        match self {
            Pooling::Batch => channels,
            Pooling::Groups(g) => n * g,
        }
    }

    fn stat(self, n: usize, c: usize, channels: usize) -> usize {
        match self {
            Pooling::Batch => c,
            Pooling::Groups(g) => n * g + c / (channels / g),
        }
    }
}

/// Visit every `(sample, channel)` plane of an `(N, C, ...)` buffer.
fn planes<'a, T>(data: &'a [T], channels: usize, inner: usize) -> impl Iterator<Item = (usize, usize, &'a [T])> {
    data.chunks(inner.max(1))
        .enumerate()
        .map(move |(k, p)| (k / channels, k % channels, p))
}

fn norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    channels: usize,
    pooling: Pooling,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let inner = norm_layout(x, channels)?;
    let n = x.shape()[0];
    let k = pooling.count(n, channels);
    let m = (x.len() / k.max(1)) as f64;
    let mut sum = vec![0.0; k];
    for (ni, c, p) in planes(x.data(), channels, inner) {
        sum[pooling.stat(ni, c, channels)] += p.iter().map(|v| v.to_f64()).sum::<f64>();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let mut sq = vec![0.0; k];
    for (ni, c, p) in planes(x.data(), channels, inner) {
        let j = pooling.stat(ni, c, channels);
        sq[j] += p.iter().map(|v| (v.to_f64() - mean[j]).powi(2)).sum::<f64>();
    }
    let inv_std: Vec<f64> = sq.iter().map(|s| 1.0 / (s / m + NORM_EPS).sqrt()).collect();
    let var = sq.iter().map(|s| s / (m - 1.0).max(1.0)).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for (ni, c, p) in planes(x.data(), channels, inner) {
        let j = pooling.stat(ni, c, channels);
        let (mu, is) = (mean[j], inv_std[j]);
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for v in p {
            let h = T::from_f64((v.to_f64() - mu) * is);
            xhat.push(h);
            y.push(h * g + b);
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        NormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
            mean,
            var,
        },
    ))
}

fn norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    channels: usize,
    pooling: Pooling,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_out.expect_shape("norm backward", cache.xhat.shape())?;
    let inner = norm_layout(grad_out, channels)?;
    let n = grad_out.shape()[0];
    let k = pooling.count(n, channels);
    let m = (grad_out.len() / k.max(1)) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    // per statistic: sums of dxhat and dxhat * xhat
    let mut s1 = vec![0.0; k];
    let mut s2 = vec![0.0; k];
    let xh = planes(cache.xhat.data(), channels, inner);
    for ((ni, c, g), (_, _, h)) in planes(grad_out.data(), channels, inner).zip(xh) {
        let j = pooling.stat(ni, c, channels);
        let gm = gamma.data()[c].to_f64();
        for (gv, hv) in g.iter().zip(h) {
            let (gv, hv) = (gv.to_f64(), hv.to_f64());
            dgamma[c] += gv * hv;
            dbeta[c] += gv;
            s1[j] += gv * gm;
            s2[j] += gv * gm * hv;
        }
    }
    let mut gi = Vec::with_capacity(grad_out.len());
    let xh = planes(cache.xhat.data(), channels, inner);
    for ((ni, c, g), (_, _, h)) in planes(grad_out.data(), channels, inner).zip(xh) {
        let j = pooling.stat(ni, c, channels);
        let gm = gamma.data()[c].to_f64();
        let kf = cache.inv_std[j] / m;
        for (gv, hv) in g.iter().zip(h) {
            gi.push(T::from_f64(kf * (m * gv.to_f64() * gm - s1[j] - hv.to_f64() * s2[j])));
        }
    }
    let to_t = |v: Vec<f64>| Tensor::from_fn([channels], |c| T::from_f64(v[c]));
    Ok((Tensor::new(grad_out.shape(), gi)?, to_t(dgamma), to_t(dbeta)))
}

/// Training-mode batch normalization with batch statistics.
pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    channels: usize,
) -> Result<(Tensor<T>, NormCache<T>)> {
    norm_forward(x, gamma, beta, channels, Pooling::Batch)
}

/// Inference normalization with the stored running mean and variance.
pub fn batch_norm_eval<T: Real>(x: &Tensor<T>, params: &[Tensor<T>], channels: usize) -> Result<Tensor<T>> {
    let inner = norm_layout(x, channels)?;
    let (gamma, beta, mean, var) = (params[0].data(), params[1].data(), params[2].data(), params[3].data());
    let mut y = Vec::with_capacity(x.len());
    for (_, c, p) in planes(x.data(), channels, inner) {
        let scale = gamma[c].to_f64() / (var[c].to_f64() + NORM_EPS).sqrt();
        let (mu, b) = (mean[c].to_f64(), beta[c].to_f64());
        y.extend(p.iter().map(|v| T::from_f64((v.to_f64() - mu) * scale + b)));
    }
    Tensor::new(x.shape(), y)
}

/// Returns input, scale and shift gradients.
pub fn batch_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    channels: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    norm_backward(grad_out, gamma, cache, channels, Pooling::Batch)
}

/// Per-sample normalization over groups of channels; identical in training
/// and inference.
pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    channels: usize,
    groups: usize,
) -> Result<(Tensor<T>, NormCache<T>)> {
    norm_forward(x, gamma, beta, channels, Pooling::Groups(groups))
}

pub fn group_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    channels: usize,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    norm_backward(grad_out, gamma, cache, channels, Pooling::Groups(groups))
}

/// FC layer followed by softmax over classes.
pub fn fc_head_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    tensor::softmax(&tensor::fully_connected(x, w, b)?)
}

pub fn fc_head_backward<T: Real>(
    grad_probs: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    probs: &Tensor<T>,
) -> Result<tensor::FcGrads<T>> {
    let g_logits = tensor::softmax_backward(grad_probs, probs)?;
    tensor::fully_connected_backward(&g_logits, x, w)
}

/// Mean of two class distributions; again a valid distribution.
pub fn aggregate<T: Real>(p1: &Tensor<T>, p2: &Tensor<T>) -> Result<Tensor<T>> {
    let mut p = tensor::add(p1, p2)?;
    let half = T::from_f64(0.5);
    p.data_mut().iter_mut().for_each(|v| *v *= half);
    Ok(p)
}

/// Parameters of one FC column of the dual head.
#[derive(Debug, Clone)]
pub struct HeadParams<T: Real> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Outputs of the two-column classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadOutput<T: Real> {
    pub p1: Tensor<T>,
    pub p2: Tensor<T>,
    pub p_agg: Tensor<T>,
}

/// Two independent FC→softmax columns over GAP features, aggregated by mean.
pub fn dual_head_forward<T: Real>(
    features: &Tensor<T>,
    heads: [&HeadParams<T>; 2],
) -> Result<DualHeadOutput<T>> {
    let p1 = fc_head_forward(features, &heads[0].weights, &heads[0].bias)?;
    let p2 = fc_head_forward(features, &heads[1].weights, &heads[1].bias)?;
    let p_agg = aggregate(&p1, &p2)?;
    Ok(DualHeadOutput { p1, p2, p_agg })
}

/// Gradients of the dual head given upstream gradients with respect to each
/// of its three outputs. Returns `(features, [head1 grads, head2 grads])`.
pub fn dual_head_backward<T: Real>(
    features: &Tensor<T>,
    heads: [&HeadParams<T>; 2],
    out: &DualHeadOutput<T>,
    grad_p1: &Tensor<T>,
    grad_p2: &Tensor<T>,
    grad_agg: &Tensor<T>,
) -> Result<(Tensor<T>, [HeadParams<T>; 2])> {
    let half = grad_agg.scale(T::from_f64(0.5));
    let g1 = fc_head_backward(&tensor::add(grad_p1, &half)?, features, &heads[0].weights, &out.p1)?;
    let g2 = fc_head_backward(&tensor::add(grad_p2, &half)?, features, &heads[1].weights, &out.p2)?;
    let grad_features = tensor::add(&g1.input, &g2.input)?;
    Ok((
        grad_features,
        [
            HeadParams {
                weights: g1.weights,
                bias: g1.bias,
            },
            HeadParams {
                weights: g2.weights,
                bias: g2.bias,
            },
        ],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vac_params(spec: &VacSpec, fill: f64) -> Vec<Tensor<f64>> {
        BlockSpec::Vac(*spec)
            .param_shapes()
            .into_iter()
            .map(|s| Tensor::full(s, fill))
            .collect()
    }

    #[test]
    fn vac_with_zero_attention_weights_halves_input() {
        let spec = VacSpec {
            channels: 4,
            condense_stride: 2,
            embed_groups: 2,
            embed_channels: 4,
        };
        let v = Tensor::<f64>::from_fn([2, 4, 6, 6], |i| (i as f64 * 0.31).sin());
        let (out, _) = vac_forward(&v, &vac_params(&spec, 0.0), &spec).unwrap();
        assert!(out.max_abs_diff(&v.scale(0.5)) == 0.0);
    }

    #[test]
    fn vac_preserves_shape() {
        let spec = VacSpec {
            channels: 16,
            condense_stride: 2,
            embed_groups: 4,
            embed_channels: 8,
        };
        let v = Tensor::<f32>::from_fn([2, 16, 56, 56], |i| ((i % 17) as f32) / 17.0);
        let params: Vec<Tensor<f32>> = BlockSpec::Vac(spec)
            .param_shapes()
            .into_iter()
            .map(|s| Tensor::full(s, 0.01))
            .collect();
        let (out, _) = vac_forward(&v, &params, &spec).unwrap();
        assert_eq!(out.shape(), v.shape());
    }

    #[test]
    fn vac_rejects_indivisible_extent() {
        let spec = VacSpec {
            channels: 2,
            condense_stride: 2,
            embed_groups: 1,
            embed_channels: 2,
        };
        let v = Tensor::<f64>::zeros([1, 2, 5, 6]);
        assert!(vac_forward(&v, &vac_params(&spec, 0.0), &spec).is_err());
    }

    #[test]
    fn aads_halves_and_preserves_constants() {
        let v = Tensor::<f32>::full([1, 3, 224, 224], 0.3);
        let (y, _) = aads_down_block(&v, &[], None).unwrap();
        assert_eq!(y.shape(), &[1, 3, 112, 112]);
        assert!(y.data().iter().all(|&x| (x - 0.3).abs() < 1e-6));
    }

    #[test]
    fn dual_head_mean_and_symmetry() {
        let p1 = Tensor::<f64>::new([1, 2], vec![1.0, 0.0]).unwrap();
        let p2 = Tensor::new([1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(aggregate(&p1, &p2).unwrap().data(), &[0.5, 0.5]);

        let x = Tensor::<f64>::from_fn([3, 5], |i| (i as f64).cos());
        let head = HeadParams {
            weights: Tensor::from_fn([2, 5], |i| i as f64 * 0.1 - 0.3),
            bias: Tensor::new([2], vec![0.1, -0.1]).unwrap(),
        };
        let out = dual_head_forward(&x, [&head, &head]).unwrap();
        assert_eq!(out.p1, out.p2);
        assert_eq!(out.p1, out.p_agg);
    }

    #[test]
    fn shape_inference_matches_execution() {
        let block = BlockSpec::AadsDown {
            in_channels: 3,
            out_channels: 5,
            conv: true,
        };
        let shape = block
            .output_shape(&[Shape::Map { c: 3, h: 7, w: 9 }])
            .unwrap();
        let params: Vec<Tensor<f64>> = block
            .param_shapes()
            .into_iter()
            .map(|s| Tensor::full(s, 0.1))
            .collect();
        let x = Tensor::zeros([2, 3, 7, 9]);
        let (y, _) = block.forward(&[&x], &params, Mode::Train).unwrap();
        assert_eq!(y.shape(), shape.batched(2).as_slice());
    }
}
