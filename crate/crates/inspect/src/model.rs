//! Frozen classifier over 224x224 grayscale plates.

use std::path::Path;
use std::time::Instant;

use defectnet::data::{Label, IMAGE_SIDE};
use defectnet::graph::{self, load_checkpoint, ArchGraph, ModelParams};
use defectnet::Tensor;
use image::DynamicImage;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub verdict: Label,
    pub confidence: f64,
    pub p_agg: [f64; 2],
    pub latency_ms: f64,
}

pub struct Classifier {
    graph: ArchGraph,
    params: ModelParams<f32>,
}

/// Decode an upload, requiring an 8-bit grayscale image of the service size.
pub fn decode_plate(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (w, h) != (IMAGE_SIDE, IMAGE_SIDE) {
        return Err(Error::Dimensions {
            expected: format!("{IMAGE_SIDE}x{IMAGE_SIDE}"),
            actual: format!("{w}x{h}"),
        });
    }
    let DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::Image(format!(
            "expected 8-bit grayscale, got {:?}",
            img.color()
        )));
    };
    let data = gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Tensor::new([1, 1, IMAGE_SIDE, IMAGE_SIDE], data)?)
}

impl Classifier {
    pub fn new(graph: ArchGraph, params: ModelParams<f32>) -> Result<Self> {
        graph.validate()?;
        params.check(&graph)?;
        match graph.input_spec() {
            Some((1, IMAGE_SIDE, IMAGE_SIDE)) => Ok(Classifier { graph, params }),
            other => Err(Error::Dimensions {
                expected: format!("a 1x{IMAGE_SIDE}x{IMAGE_SIDE} model input"),
                actual: format!("{other:?}"),
            }),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        Classifier::new(ckpt.graph, ckpt.params)
    }

    pub fn graph(&self) -> &ArchGraph {
        &self.graph
    }

    /// Classify one decoded plate, `(1, 1, 224, 224)`.
    pub fn classify(&self, x: &Tensor<f32>) -> Result<Classification> {
        let t = Instant::now();
        let out = graph::forward(&self.graph, &self.params, x)?;
        let latency_ms = t.elapsed().as_secs_f64() * 1e3;
        let p = out.p_agg.data();
        let p_agg = [p[0] as f64, p[1] as f64];
        let verdict = if p_agg[1] > p_agg[0] {
            Label::Defective
        } else {
            Label::NonDefective
        };
        Ok(Classification {
            verdict,
            confidence: p_agg[0].max(p_agg[1]),
            p_agg,
            latency_ms,
        })
    }
}
