//! Per-node parameter storage, initialization and checkpoints.
//!
//! Checkpoint layout (little endian): `b"LDCK"`, `u32` version, `u32` length
//! + graph JSON, `u32` length + metadata JSON, `u32` tensor count, then the
//! tensors as `TNSR` blobs in node order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ArchGraph;
use crate::blocks::BlockSpec;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameter tensors grouped by node id, in [`crate::blocks::BlockSpec::param_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub nodes: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> ModelParams<T> {
    /// Kaiming-uniform weights (gain for ReLU where one follows), zero biases.
    /// Normalization scales and running variances start at one.
    pub fn init(graph: &ArchGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = graph
            .nodes
            .iter()
            .map(|node| {
                let shapes = node.block.param_shapes();
                let hints = node.block.init_hints();
                shapes
                    .into_iter()
                    .zip(hints)
                    .map(|(shape, hint)| match hint {
                        Some((fan_in, relu)) => {
                            let gain = if relu { 6.0 } else { 3.0 };
                            let bound = (gain / fan_in.max(1) as f64).sqrt();
                            Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound)))
                        }
                        None => Tensor::zeros(shape),
                    })
                    .enumerate()
                    .map(|(i, t)| match (node.block, i) {
                        (BlockSpec::BatchNorm { .. }, 0 | 3) | (BlockSpec::GroupNorm { .. }, 0) => {
                            Tensor::full(t.shape(), T::from_f64(1.0))
                        }
                        _ => t,
                    })
                    .collect()
            })
            .collect();
        ModelParams { nodes }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            nodes: self
                .nodes
                .iter()
                .map(|ts| ts.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect(),
        }
    }

    /// Number of stored scalars, running statistics included.
    pub fn count(&self) -> u64 {
        self.iter().map(|t| t.len() as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.nodes.iter_mut().flatten()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            nodes: self
                .nodes
                .iter()
                .map(|ts| ts.iter().map(|t| t.cast()).collect())
                .collect(),
        }
    }

    /// Check every tensor against the graph's declared shapes.
    pub fn check(&self, graph: &ArchGraph) -> Result<()> {
        if self.nodes.len() != graph.nodes.len() {
            return Err(Error::shape(
                "params",
                "node count",
                graph.nodes.len(),
                self.nodes.len(),
            ));
        }
        for (node, ts) in graph.nodes.iter().zip(&self.nodes) {
            let shapes = node.block.param_shapes();
            if shapes.len() != ts.len() {
                return Err(Error::shape("params", "tensor count", shapes.len(), ts.len())
                    .at_node(node.id));
            }
            for (s, t) in shapes.iter().zip(ts) {
                t.expect_shape("params", s).map_err(|e| e.at_node(node.id))?;
            }
        }
        Ok(())
    }
}

/// A trained model: architecture, parameters and free-form metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub graph: ArchGraph,
    pub params: ModelParams<f32>,
    pub metadata: serde_json::Value,
}

fn write_u32<W: Write>(out: &mut W, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format {
        what: "checkpoint",
        reason: format!("{what} {v} does not fit in u32"),
    })?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_blob<R: Read>(input: &mut R) -> Result<Vec<u8>> {
    let len = read_u32(input)? as usize;
    let mut buf = Vec::new();
    input.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!("truncated section: expected {len} bytes, got {}", buf.len()),
        });
    }
    Ok(buf)
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        self.params.check(&self.graph)?;
        out.write_all(&CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let graph = serde_json::to_vec(&self.graph)?;
        write_u32(out, graph.len(), "graph length")?;
        out.write_all(&graph)?;
        let meta = serde_json::to_vec(&self.metadata)?;
        write_u32(out, meta.len(), "metadata length")?;
        out.write_all(&meta)?;
        write_u32(out, self.params.iter().count(), "tensor count")?;
        for t in self.params.iter() {
            write_tensor(out, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("bad magic {magic:?}"),
            });
        }
        let version = read_u32(input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("unsupported version {version}"),
            });
        }
        let graph: ArchGraph = serde_json::from_slice(&read_blob(input)?)?;
        graph.validate()?;
        let metadata: serde_json::Value = serde_json::from_slice(&read_blob(input)?)?;
        let count = read_u32(input)? as usize;
        let mut nodes = Vec::with_capacity(graph.nodes.len());
        let mut read = 0;
        for node in &graph.nodes {
            let n = node.block.param_shapes().len();
            let mut ts = Vec::with_capacity(n);
            for _ in 0..n {
                if read == count {
                    return Err(Error::Format {
                        what: "checkpoint",
                        reason: format!("holds {count} tensors, graph needs more"),
                    });
                }
                ts.push(read_tensor(input)?);
                read += 1;
            }
            nodes.push(ts);
        }
        if read != count {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("holds {count} tensors, graph needs {read}"),
            });
        }
        let params = ModelParams { nodes };
        params.check(&graph)?;
        Ok(Checkpoint {
            graph,
            params,
            metadata,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = BufWriter::new(file);
    ckpt.write_to(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Checkpoint::read_from(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_reference_config;

    #[test]
    fn init_matches_declared_shapes_and_is_seeded() {
        let g = build_reference_config();
        let a = ModelParams::<f32>::init(&g, 7);
        a.check(&g).unwrap();
        let stats: u64 = g
            .nodes
            .iter()
            .map(|n| n.block.param_shapes()[n.block.trainable_tensors()..].iter().map(|s| s[0] as u64).sum::<u64>())
            .sum();
        assert_eq!(a.count(), g.count_params() + stats);
        assert_eq!(a, ModelParams::init(&g, 7));
        assert_ne!(a, ModelParams::init(&g, 8));
        assert!(a.iter().all(|t| t.all_finite()));
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let g = build_reference_config();
        let ckpt = Checkpoint {
            params: ModelParams::init(&g, 1),
            graph: g,
            metadata: serde_json::json!({"epochs": 3}),
        };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.graph, ckpt.graph);
        assert_eq!(back.params, ckpt.params);
        assert_eq!(back.metadata, ckpt.metadata);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        buf.truncate(buf.len() / 2);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
