//! Columnar design genomes.
//!
//! A [`Design`] is a compact description of a columnar network: a stem, a
//! sequence of stages whose parallel columns either merge (channel concat +
//! pointwise fusion) or run on independently into the next stage, and the
//! dual head. [`Design::compile`] lowers it to an [`ArchGraph`]; lowering
//! repairs locally inconsistent choices (group counts, condense strides,
//! downsampling of tiny maps) so every design compiles to a valid graph.
//! This is what lets the search mutate designs freely.

use serde::{Deserialize, Serialize};

use super::{ArchGraph, NUM_CLASSES};
use crate::blocks::{BlockSpec, Shape, VacSpec};
use crate::error::Result;

/// Version tag of the shipped reference configuration.
pub const REFERENCE_VERSION: &str = "lightdefect-ref-v1";

/// Upper bound on the group count of normalized designs.
pub const NORM_GROUPS: usize = 8;

/// Spatial reduction by a factor of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Downsample {
    /// Blur pool, optionally preceded by a stride-1 3x3 conv to `out`.
    Aads { out: Option<usize> },
    /// 2x2 max pool with stride 2.
    MaxPool,
    /// 3x3 conv with stride 2.
    StridedConv { out: usize },
    /// 1x1 conv with stride 2.
    StridedPointwise { out: usize },
}

/// Stride-1 layer inside a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv3x3 { out: usize, groups: usize },
    Depthwise,
    Pointwise { out: usize },
    Vac { stride: usize, embed: usize, groups: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Column {
    pub layers: Vec<Layer>,
    /// Add the column input to its output (projected by a pointwise conv
    /// when the channel counts differ).
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stage {
    pub columns: Vec<Column>,
    /// Merge the columns at the end of the stage. The last stage always
    /// merges, and so does any stage followed by a different column count.
    pub merge: bool,
    /// Channels after the merge fusion.
    pub out_channels: usize,
    /// Applied after the merge, or to every column when not merged.
    pub downsample: Option<Downsample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stem {
    pub channels: usize,
    pub downsample: Vec<Downsample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Design {
    pub name: String,
    pub input_channels: usize,
    pub input_size: usize,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    /// Standardize each input image, group-normalize every convolution
    /// output ahead of its ReLU and batch-normalize the pooled features.
    #[serde(default)]
    pub normalized: bool,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Largest groups count `<= requested` dividing every channel count.
fn fit_groups(requested: usize, channels: &[usize]) -> usize {
    let common = channels.iter().fold(0, |g, &c| gcd(g, c)).max(1);
    (1..=requested.max(1).min(common))
        .rev()
        .find(|g| common % g == 0)
        .unwrap_or(1)
}

struct Builder {
    graph: ArchGraph,
    shapes: Vec<Shape>,
    layer_norm: bool,
}

impl Builder {
    fn add(&mut self, block: BlockSpec, inputs: Vec<usize>, column: Option<usize>) -> Result<usize> {
        let in_shapes: Vec<Shape> = inputs.iter().map(|&i| self.shapes[i]).collect();
        let shape = block.output_shape(&in_shapes)?;
        let id = self.graph.push(block, inputs, column);
        self.shapes.push(shape);
        Ok(id)
    }

    fn dims(&self, id: usize) -> (usize, usize, usize) {
        match self.shapes[id] {
            Shape::Map { c, h, w } => (c, h, w),
            Shape::Flat(f) => (f, 1, 1),
        }
    }

    fn layer(&mut self, layer: Layer, from: usize, column: Option<usize>) -> Result<usize> {
        let (c, h, w) = self.dims(from);
        let block = match layer {
            Layer::Conv3x3 { out, groups } => {
                let out = out.max(1);
                BlockSpec::Conv3x3 {
                    in_channels: c,
                    out_channels: out,
                    stride: 1,
                    groups: fit_groups(groups, &[c, out]),
                    relu: true,
                }
            }
            Layer::Depthwise => BlockSpec::ConvDepthwise {
                channels: c,
                stride: 1,
                relu: true,
            },
            Layer::Pointwise { out } => BlockSpec::Conv1x1 {
                in_channels: c,
                out_channels: out.max(1),
                stride: 1,
                relu: true,
            },
            Layer::Vac {
                stride,
                embed,
                groups,
            } => {
                // Largest usable condense stride not above the requested one.
                let Some(s) = (2..=stride.max(2))
                    .rev()
                    .find(|s| h % s == 0 && w % s == 0)
                else {
                    return Ok(from);
                };
                let embed = embed.max(1);
                BlockSpec::Vac(VacSpec {
                    channels: c,
                    condense_stride: s,
                    embed_groups: fit_groups(groups, &[c, embed]),
                    embed_channels: embed,
                })
            }
        };
        self.add_normed(block, vec![from], column)
    }

    /// Add a block; with layer normalization on, a trailing ReLU moves
    /// behind a group-norm node.
    fn add_normed(&mut self, block: BlockSpec, inputs: Vec<usize>, column: Option<usize>) -> Result<usize> {
        let conv = matches!(
            block,
            BlockSpec::Conv3x3 { .. } | BlockSpec::ConvDepthwise { .. } | BlockSpec::Conv1x1 { .. }
        );
        if !self.layer_norm || !conv {
            return self.add(block, inputs, column);
        }
        let (bare, relu) = block.without_relu();
        let y = self.add(bare, inputs, column)?;
        let (c, _, _) = self.dims(y);
        let groups = fit_groups(NORM_GROUPS, &[c]);
        self.add(BlockSpec::GroupNorm { channels: c, groups, relu }, vec![y], column)
    }

    fn downsample(&mut self, d: Downsample, from: usize, column: Option<usize>) -> Result<usize> {
        let (c, h, w) = self.dims(from);
        if h < 2 || w < 2 {
            return Ok(from);
        }
        let block = match d {
            Downsample::Aads { out: None } => BlockSpec::AadsDown {
                in_channels: c,
                out_channels: c,
                conv: false,
            },
            Downsample::Aads { out: Some(out) } => BlockSpec::AadsDown {
                in_channels: c,
                out_channels: out.max(1),
                conv: true,
            },
            Downsample::MaxPool => BlockSpec::MaxPool {
                kernel: 2,
                stride: 2,
            },
            Downsample::StridedConv { out } => BlockSpec::Conv3x3 {
                in_channels: c,
                out_channels: out.max(1),
                stride: 2,
                groups: 1,
                relu: true,
            },
            Downsample::StridedPointwise { out } => BlockSpec::Conv1x1 {
                in_channels: c,
                out_channels: out.max(1),
                stride: 2,
                relu: true,
            },
        };
        self.add_normed(block, vec![from], column)
    }

    /// Concat (if several) then pointwise fusion to `out` channels (if needed).
    fn merge(&mut self, branches: &[usize], out: usize) -> Result<usize> {
        let out = out.max(1);
        let joined = if branches.len() > 1 {
            self.add(BlockSpec::Concat, branches.to_vec(), None)?
        } else {
            branches[0]
        };
        let (c, _, _) = self.dims(joined);
        if branches.len() == 1 && c == out {
            return Ok(joined);
        }
        self.add_normed(
            BlockSpec::Conv1x1 {
                in_channels: c,
                out_channels: out,
                stride: 1,
                relu: true,
            },
            vec![joined],
            None,
        )
    }

    /// Spatial sizes can drift apart between unmerged columns when a
    /// downsample is skipped on a tiny map; merges need them equal.
    fn same_extent(&self, ids: &[usize]) -> bool {
        let (_, h, w) = self.dims(ids[0]);
        ids.iter().all(|&i| {
            let (_, hi, wi) = self.dims(i);
            (hi, wi) == (h, w)
        })
    }
}

impl Design {
    /// Lower the design to an architecture graph.
    pub fn compile(&self) -> Result<ArchGraph> {
        let mut b = Builder {
            graph: ArchGraph::new(self.name.clone()),
            shapes: Vec::new(),
            layer_norm: self.normalized,
        };
        let input = b.add(
            BlockSpec::Input {
                channels: self.input_channels.max(1),
                height: self.input_size,
                width: self.input_size,
            },
            vec![],
            None,
        )?;
        let input = if self.normalized {
            let c = self.input_channels.max(1);
            b.add(BlockSpec::GroupNorm { channels: c, groups: 1, relu: false }, vec![input], None)?
        } else {
            input
        };
        let mut cur = b.add_normed(
            BlockSpec::Conv3x3 {
                in_channels: self.input_channels.max(1),
                out_channels: self.stem.channels.max(1),
                stride: 1,
                groups: 1,
                relu: true,
            },
            vec![input],
            None,
        )?;
        for &d in &self.stem.downsample {
            cur = b.downsample(d, cur, None)?;
        }

        let mut branches = vec![cur];
        for (si, stage) in self.stages.iter().enumerate() {
            let ncols = stage.columns.len().max(1);
            if branches.len() > 1 && branches.len() != ncols {
                branches = vec![b.merge(&branches, self.stages[si - 1].out_channels)?];
            }
            let mut outs = Vec::with_capacity(ncols);
            if stage.columns.is_empty() {
                outs.push(branches[0]);
            }
            for (ci, col) in stage.columns.iter().enumerate() {
                let start = branches[if branches.len() == 1 { 0 } else { ci }];
                let column = Some(ci);
                let mut x = start;
                for &layer in &col.layers {
                    x = b.layer(layer, x, column)?;
                }
                if col.residual && x != start {
                    let (cs, _, _) = b.dims(start);
                    let (cx, _, _) = b.dims(x);
                    let skip = if cs == cx {
                        start
                    } else {
                        b.add(
                            BlockSpec::Conv1x1 {
                                in_channels: cs,
                                out_channels: cx,
                                stride: 1,
                                relu: false,
                            },
                            vec![start],
                            column,
                        )?
                    };
                    x = b.add(BlockSpec::Add, vec![skip, x], column)?;
                }
                outs.push(x);
            }

            let last = si + 1 == self.stages.len();
            let next_cols = self.stages.get(si + 1).map(|s| s.columns.len().max(1));
            let merge = stage.merge
                || last
                || outs.len() == 1
                || next_cols != Some(outs.len())
                || !b.same_extent(&outs);
            branches = if merge {
                let mut m = b.merge(&outs, stage.out_channels)?;
                if let Some(d) = stage.downsample {
                    m = b.downsample(d, m, None)?;
                }
                vec![m]
            } else {
                let mut v = Vec::with_capacity(outs.len());
                for (ci, &o) in outs.iter().enumerate() {
                    v.push(match stage.downsample {
                        Some(d) => b.downsample(d, o, Some(ci))?,
                        None => o,
                    });
                }
                if !b.same_extent(&v) {
                    let out = stage.out_channels;
                    v = vec![b.merge(&outs, out)?];
                }
                v
            };
        }
        let trunk = if branches.len() == 1 {
            branches[0]
        } else {
            b.merge(&branches, self.stages.last().map_or(1, |s| s.out_channels))?
        };
        let gap = b.add(BlockSpec::Gap, vec![trunk], None)?;
        let (features, _, _) = b.dims(gap);
        let pooled = if self.normalized {
            b.add(BlockSpec::BatchNorm { channels: features, relu: false }, vec![gap], None)?
        } else {
            gap
        };
        let head = BlockSpec::FcHead {
            in_features: features,
            classes: NUM_CLASSES,
        };
        let h1 = b.add(head, vec![pooled], Some(0))?;
        let h2 = b.add(head, vec![pooled], Some(1))?;
        b.add(BlockSpec::Aggregate, vec![h1, h2], None)?;
        Ok(b.graph)
    }

    /// Every downsampling site, stem first.
    pub fn downsamples_mut(&mut self) -> impl Iterator<Item = &mut Downsample> {
        self.stem
            .downsample
            .iter_mut()
            .chain(self.stages.iter_mut().filter_map(|s| s.downsample.as_mut()))
    }

    /// Same design with every downsampling site replaced by `kind` (keeps
    /// channel counts for kinds that carry them).
    pub fn with_downsampling(&self, kind: Downsample) -> Design {
        let mut d = self.clone();
        for site in d.downsamples_mut() {
            let out = match *site {
                Downsample::Aads { out } => out,
                Downsample::StridedConv { out } | Downsample::StridedPointwise { out } => Some(out),
                Downsample::MaxPool => None,
            };
            *site = match (kind, out) {
                (Downsample::Aads { .. }, out) => Downsample::Aads { out },
                (Downsample::MaxPool, _) => Downsample::MaxPool,
                (Downsample::StridedConv { out: o }, None) => Downsample::StridedConv { out: o },
                (Downsample::StridedConv { .. }, Some(o)) => Downsample::StridedConv { out: o },
                (Downsample::StridedPointwise { out: o }, None) => {
                    Downsample::StridedPointwise { out: o }
                }
                (Downsample::StridedPointwise { .. }, Some(o)) => {
                    Downsample::StridedPointwise { out: o }
                }
            };
        }
        d
    }

    /// The same topology at a different input resolution.
    pub fn at_resolution(&self, size: usize) -> Design {
        Design {
            input_size: size,
            ..self.clone()
        }
    }
}

fn vac(stride: usize, embed: usize, groups: usize) -> Layer {
    Layer::Vac {
        stride,
        embed,
        groups,
    }
}

fn conv(out: usize, groups: usize) -> Layer {
    Layer::Conv3x3 { out, groups }
}

fn pw(out: usize) -> Layer {
    Layer::Pointwise { out }
}

fn col(layers: Vec<Layer>, residual: bool) -> Column {
    Column { layers, residual }
}

const AADS: Option<Downsample> = Some(Downsample::Aads { out: None });

/// The shipped reference design.
///
/// Attention condensers sit in the first two stages, which run three
/// independent columns without interaction across two resolutions; the
/// later stages merge after every stage. All spatial reduction is
/// anti-aliased and no pointwise conv is strided.
pub fn reference_design() -> Design {
    Design {
        name: REFERENCE_VERSION.to_string(),
        input_channels: 1,
        input_size: 224,
        normalized: true,
        stem: Stem {
            channels: 12,
            downsample: vec![Downsample::Aads { out: None }, Downsample::Aads { out: None }],
        },
        stages: vec![
            // 56x56: three independent columns, no merge
            Stage {
                columns: vec![
                    col(vec![vac(2, 16, 4), Layer::Depthwise, pw(24)], false),
                    col(vec![conv(16, 4), vac(4, 16, 4)], true),
                    col(vec![vac(2, 8, 2), pw(16)], false),
                ],
                merge: false,
                out_channels: 48,
                downsample: AADS,
            },
            // 28x28: columns continue, first interaction at the end
            Stage {
                columns: vec![
                    col(vec![vac(2, 24, 4), conv(32, 4)], false),
                    col(vec![Layer::Depthwise, pw(32)], false),
                    col(vec![conv(24, 2)], false),
                ],
                merge: true,
                out_channels: 48,
                downsample: AADS,
            },
            // 14x14
            Stage {
                columns: vec![
                    col(vec![conv(48, 4), pw(64)], false),
                    col(vec![vac(2, 32, 4), pw(64)], true),
                ],
                merge: true,
                out_channels: 112,
                downsample: AADS,
            },
            // 7x7
            Stage {
                columns: vec![
                    col(vec![conv(112, 2)], true),
                    col(vec![Layer::Depthwise, pw(192)], false),
                ],
                merge: true,
                out_channels: 224,
                downsample: AADS,
            },
            // 4x4
            Stage {
                columns: vec![col(vec![conv(224, 2)], true), col(vec![pw(320)], false)],
                merge: true,
                out_channels: 512,
                downsample: None,
            },
        ],
    }
}

/// Build the frozen reference architecture graph.
pub fn build_reference_config() -> ArchGraph {
    reference_design()
        .compile()
        .expect("reference design compiles")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_compiles_and_validates() {
        let g = build_reference_config();
        g.validate().unwrap();
        let params = g.count_params();
        let flops = g.count_flops(224, 224).unwrap();
        assert!((700_000..=850_000).contains(&params), "{params}");
        assert!(flops <= 100_000_000, "{flops}");
    }

    #[test]
    fn group_fitting() {
        assert_eq!(fit_groups(4, &[16, 24]), 4);
        assert_eq!(fit_groups(4, &[16, 6]), 2);
        assert_eq!(fit_groups(3, &[16, 8]), 2);
        assert_eq!(fit_groups(0, &[5]), 1);
    }

    #[test]
    fn vac_stride_adapts_or_is_dropped() {
        let d = Design {
            name: "t".into(),
            input_channels: 1,
            input_size: 7,
            normalized: false,
            stem: Stem {
                channels: 4,
                downsample: vec![],
            },
            stages: vec![Stage {
                columns: vec![col(vec![vac(4, 4, 2)], false)],
                merge: true,
                out_channels: 4,
                downsample: None,
            }],
        };
        // 7x7 has no condense stride >= 2 dividing it: the VAC is skipped
        let g = d.compile().unwrap();
        g.validate().unwrap();
        assert!(!g.nodes.iter().any(|n| matches!(n.block, BlockSpec::Vac(_))));

        let g = d.at_resolution(12).compile().unwrap();
        let v = g
            .nodes
            .iter()
            .find_map(|n| match n.block {
                BlockSpec::Vac(v) => Some(v),
                _ => None,
            })
            .unwrap();
        assert_eq!(v.condense_stride, 4);
    }

    #[test]
    fn maxpool_twin_swaps_every_site() {
        let twin = reference_design().with_downsampling(Downsample::MaxPool);
        let g = twin.compile().unwrap();
        g.validate().unwrap();
        assert!(!g
            .nodes
            .iter()
            .any(|n| matches!(n.block, BlockSpec::AadsDown { .. })));
        assert!(g
            .nodes
            .iter()
            .any(|n| matches!(n.block, BlockSpec::MaxPool { .. })));
    }
}
