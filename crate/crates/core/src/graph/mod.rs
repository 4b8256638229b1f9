//! Architecture graphs: a topologically ordered DAG of [`BlockSpec`] nodes
//! with a single image input and a two-column softmax head.

mod design;
mod exec;
mod params;

pub use design::{
    build_reference_config, reference_design, Column, Design, Downsample, Layer, Stage, Stem,
    REFERENCE_VERSION,
};
pub use exec::{backward, forward, forward_trace, predict, update_running_stats, Trace};
pub use params::{load_checkpoint, save_checkpoint, Checkpoint, ModelParams};

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockSpec, Shape};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub block: BlockSpec,
    /// Predecessors; always lower ids, which makes the graph acyclic.
    pub inputs: Vec<usize>,
    /// Column annotation (`None` for shared trunk/merge/head nodes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchGraph {
    pub name: String,
    pub nodes: Vec<Node>,
}

impl ArchGraph {
    pub fn new(name: impl Into<String>) -> Self {
        ArchGraph {
            name: name.into(),
            nodes: Vec::new(),
        }
    }

    /// Append a node and return its id.
    pub fn push(&mut self, block: BlockSpec, inputs: Vec<usize>, column: Option<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            block,
            inputs,
            column,
        });
        id
    }

    pub fn input_spec(&self) -> Option<(usize, usize, usize)> {
        match self.nodes.first().map(|n| n.block) {
            Some(BlockSpec::Input {
                channels,
                height,
                width,
            }) => Some((channels, height, width)),
            _ => None,
        }
    }

    /// Ids of the two FC heads (in node order) and the aggregation node.
    pub fn head_ids(&self) -> Result<([usize; 2], usize)> {
        let heads: Vec<usize> = self
            .nodes
            .iter()
            .filter(|n| matches!(n.block, BlockSpec::FcHead { .. }))
            .map(|n| n.id)
            .collect();
        let aggs: Vec<usize> = self
            .nodes
            .iter()
            .filter(|n| matches!(n.block, BlockSpec::Aggregate))
            .map(|n| n.id)
            .collect();
        match (heads.as_slice(), aggs.as_slice()) {
            (&[a, b], &[agg]) => Ok(([a, b], agg)),
            _ => Err(Error::Graph(format!(
                "expected exactly two FC heads and one aggregation node, found {} and {}",
                heads.len(),
                aggs.len()
            ))),
        }
    }

    /// Per-node per-sample shapes, with the input resized to `h x w`.
    pub fn shapes_at(&self, h: usize, w: usize) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            for &i in &node.inputs {
                if i >= node.id {
                    return Err(Error::Graph(format!(
                        "node {} reads node {i}, which does not precede it",
                        node.id
                    )));
                }
            }
            let inputs: Vec<Shape> = node.inputs.iter().map(|&i| shapes[i]).collect();
            let shape = match node.block {
                BlockSpec::Input { channels, .. } => Shape::Map { c: channels, h, w },
                block => block.output_shape(&inputs).map_err(|e| e.at_node(node.id))?,
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let (_, h, w) = self
            .input_spec()
            .ok_or_else(|| Error::Graph("node 0 must be the input".into()))?;
        self.shapes_at(h, w)
    }

    /// Structural validation: a single input at node 0, topological order,
    /// correct arities and shapes, no dangling nodes, and exactly two FC heads
    /// feeding one aggregation node that is the two-class output.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Graph(format!("node at position {i} has id {}", node.id)));
            }
            let is_input = matches!(node.block, BlockSpec::Input { .. });
            if is_input != (i == 0) {
                return Err(Error::Graph(format!(
                    "node {i}: the input must be node 0 and appear exactly once"
                )));
            }
        }
        let shapes = self.shapes()?;
        let ([h1, h2], agg) = self.head_ids()?;
        if self.nodes[agg].inputs != [h1, h2] && self.nodes[agg].inputs != [h2, h1] {
            return Err(Error::Graph(format!(
                "aggregation node {agg} must read both heads {h1} and {h2}"
            )));
        }
        if agg != self.nodes.len() - 1 {
            return Err(Error::Graph(format!(
                "aggregation node {agg} must be the last node"
            )));
        }
        if shapes[agg] != Shape::Flat(NUM_CLASSES) {
            return Err(Error::Graph(format!(
                "output must be a {NUM_CLASSES}-class distribution, got {:?}",
                shapes[agg]
            )));
        }
        let consumers = self.consumer_counts();
        for node in &self.nodes[..agg] {
            if consumers[node.id] == 0 {
                return Err(Error::Graph(format!("node {} is never consumed", node.id)));
            }
        }
        Ok(())
    }

    pub(crate) fn consumer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                counts[i] += 1;
            }
        }
        counts
    }

    pub fn count_params(&self) -> u64 {
        self.nodes.iter().map(|n| n.block.param_count()).sum()
    }

    /// Analytic per-sample FLOPs with the input at `h x w`.
    pub fn count_flops(&self, h: usize, w: usize) -> Result<u64> {
        Ok(self.node_flops(h, w)?.iter().sum())
    }

    pub fn node_flops(&self, h: usize, w: usize) -> Result<Vec<u64>> {
        let shapes = self.shapes_at(h, w)?;
        Ok(self
            .nodes
            .iter()
            .map(|n| {
                let inputs: Vec<Shape> = n.inputs.iter().map(|&i| shapes[i]).collect();
                n.block.flops(&inputs, shapes[n.id])
            })
            .collect())
    }

    /// FLOPs at the graph's own input size.
    pub fn flops(&self) -> Result<u64> {
        match self.input_spec() {
            Some((_, h, w)) => self.count_flops(h, w),
            None => Ok(0),
        }
    }

    /// Stable content hash used to identify graphs in search logs.
    pub fn fingerprint(&self) -> String {
        // FNV-1a over the canonical JSON keeps the value stable across builds.
        let json = serde_json::to_string(self).expect("graph serialization cannot fail");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Human-readable structured text (pretty JSON: node list with specs,
    /// inputs and columns).
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization cannot fail")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Edge list `(from, to)` in node order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(move |&i| (i, n.id)))
            .collect()
    }
}
