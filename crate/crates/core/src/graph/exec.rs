//! Graph execution: inference, traced forward and reverse-mode backward.

use super::{ArchGraph, ModelParams};
use crate::blocks::{BlockCache, BlockSpec, DualHeadOutput, Mode, NORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn check_input<T: Real>(graph: &ArchGraph, params: &ModelParams<T>, x: &Tensor<T>) -> Result<()> {
    let (c, _, _) = graph
        .input_spec()
        .ok_or_else(|| Error::Graph("node 0 must be the input".into()))?;
    let (_, xc, _, _) = x.dims4("graph input")?;
    if xc != c {
        return Err(Error::shape("graph input", "channels", c, xc));
    }
    if params.nodes.len() != graph.nodes.len() {
        return Err(Error::shape(
            "params",
            "node count",
            graph.nodes.len(),
            params.nodes.len(),
        ));
    }
    Ok(())
}

/// Every node output and backward cache from one forward pass.
#[derive(Debug)]
pub struct Trace<T: Real> {
    pub outputs: Vec<Tensor<T>>,
    caches: Vec<BlockCache<T>>,
    heads: [usize; 2],
    agg: usize,
}

impl<T: Real> Trace<T> {
    /// `(node, batch mean, unbiased batch variance, values per statistic)`
    /// for every normalization node of a training-mode trace.
    pub fn norm_stats(&self) -> impl Iterator<Item = (usize, &[f64], &[f64], f64)> + '_ {
        self.caches.iter().enumerate().filter_map(|(id, c)| match c {
            BlockCache::Norm(n) => Some((id, n.mean.as_slice(), n.var.as_slice(), n.per_stat() as f64)),
            _ => None,
        })
    }

    pub fn p1(&self) -> &Tensor<T> {
        &self.outputs[self.heads[0]]
    }

    pub fn p2(&self) -> &Tensor<T> {
        &self.outputs[self.heads[1]]
    }

    pub fn p_agg(&self) -> &Tensor<T> {
        &self.outputs[self.agg]
    }
}

/// Forward pass keeping everything needed for [`backward`]. Only a
/// [`Mode::Train`] trace can be differentiated through normalization blocks.
pub fn forward_trace<T: Real>(
    graph: &ArchGraph,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<Trace<T>> {
    check_input(graph, params, x)?;
    let (heads, agg) = graph.head_ids()?;
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(graph.nodes.len());
    let mut caches = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        if let BlockSpec::Input { .. } = node.block {
            outputs.push(x.clone());
            caches.push(BlockCache::None);
            continue;
        }
        let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &outputs[i]).collect();
        let (y, cache) = node
            .block
            .forward(&inputs, &params.nodes[node.id], mode)
            .map_err(|e| e.at_node(node.id))?;
        outputs.push(y);
        caches.push(cache);
    }
    Ok(Trace {
        outputs,
        caches,
        heads,
        agg,
    })
}

/// Inference forward pass; intermediates are released as soon as their
/// last consumer has run.
pub fn forward<T: Real>(
    graph: &ArchGraph,
    params: &ModelParams<T>,
    x: &Tensor<T>,
) -> Result<DualHeadOutput<T>> {
    check_input(graph, params, x)?;
    let ([h1, h2], agg) = graph.head_ids()?;
    let mut remaining = graph.consumer_counts();
    remaining[h1] += 1;
    remaining[h2] += 1;
    remaining[agg] += 1;
    let mut outputs: Vec<Option<Tensor<T>>> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let y = match node.block {
            BlockSpec::Input { .. } => x.clone(),
            block => {
                let inputs: Vec<&Tensor<T>> = node
                    .inputs
                    .iter()
                    .map(|&i| outputs[i].as_ref().expect("output consumed early"))
                    .collect();
                block
                    .forward(&inputs, &params.nodes[node.id], Mode::Eval)
                    .map_err(|e| e.at_node(node.id))?
                    .0
            }
        };
        outputs.push(Some(y));
        for &i in &node.inputs {
            remaining[i] -= 1;
            if remaining[i] == 0 {
                outputs[i] = None;
            }
        }
    }
    let mut take = |i: usize| outputs[i].take().expect("head output kept");
    Ok(DualHeadOutput {
        p1: take(h1),
        p2: take(h2),
        p_agg: take(agg),
    })
}

/// Fold the batch statistics of a training trace into the running
/// statistics of every normalization node.
pub fn update_running_stats<T: Real>(params: &mut ModelParams<T>, trace: &Trace<T>) {
    for (node, cache) in params.nodes.iter_mut().zip(&trace.caches) {
        let BlockCache::Norm(c) = cache else { continue };
        if node.len() < 4 {
            continue;
        }
        for (t, batch) in node[2..4].iter_mut().zip([&c.mean, &c.var]) {
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = T::from_f64((1.0 - NORM_MOMENTUM) * r.to_f64() + NORM_MOMENTUM * b);
            }
        }
    }
}

/// Predicted class per sample (argmax of the aggregated distribution).
pub fn predict<T: Real>(
    graph: &ArchGraph,
    params: &ModelParams<T>,
    x: &Tensor<T>,
) -> Result<Vec<usize>> {
    let p = forward(graph, params, x)?.p_agg;
    let (n, c) = p.dims2("predict")?;
    Ok((0..n)
        .map(|i| {
            let row = &p.data()[i * c..(i + 1) * c];
            (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect())
}

/// Reverse pass from loss gradients w.r.t. the two head distributions and
/// the aggregated one (any may be `None`). Returns parameter gradients.
pub fn backward<T: Real>(
    graph: &ArchGraph,
    params: &ModelParams<T>,
    trace: &Trace<T>,
    grad_p1: Option<&Tensor<T>>,
    grad_p2: Option<&Tensor<T>>,
    grad_agg: Option<&Tensor<T>>,
) -> Result<ModelParams<T>> {
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; graph.nodes.len()];
    let seeds = [
        (trace.heads[0], grad_p1),
        (trace.heads[1], grad_p2),
        (trace.agg, grad_agg),
    ];
    for (id, g) in seeds {
        if let Some(g) = g {
            g.expect_shape("backward seed", trace.outputs[id].shape())?;
            grads[id] = Some(g.clone());
        }
    }
    let mut out = params.zeros_like();
    for node in graph.nodes.iter().rev() {
        let Some(g) = grads[node.id].take() else {
            continue;
        };
        if let BlockSpec::Input { .. } = node.block {
            continue;
        }
        let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &trace.outputs[i]).collect();
        let need_input = node.inputs.iter().any(|&i| i != 0);
        let (gin, gparams) = node
            .block
            .backward(
                &inputs,
                &params.nodes[node.id],
                &trace.outputs[node.id],
                &trace.caches[node.id],
                &g,
                need_input,
            )
            .map_err(|e| e.at_node(node.id))?;
        out.nodes[node.id] = gparams;
        for (&i, gi) in node.inputs.iter().zip(gin) {
            let Some(gi) = gi else { continue };
            if i == 0 {
                continue;
            }
            match &mut grads[i] {
                Some(acc) => acc.add_assign(&gi)?,
                slot => *slot = Some(gi),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_reference_config;

    #[test]
    fn forward_and_trace_agree() {
        let g = build_reference_config();
        let p = ModelParams::<f32>::init(&g, 3);
        let x = Tensor::from_fn([2, 1, 224, 224], |i| ((i * 7919) % 101) as f32 / 100.0);
        let a = forward(&g, &p, &x).unwrap();
        let t = forward_trace(&g, &p, &x, Mode::Eval).unwrap();
        assert_eq!(&a.p_agg, t.p_agg());
        assert_eq!(a.p_agg.shape(), &[2, 2]);
        for i in 0..2 {
            let row = &a.p_agg.data()[2 * i..2 * i + 2];
            assert!((row[0] + row[1] - 1.0).abs() < 1e-5);
        }
        assert_eq!(predict(&g, &p, &x).unwrap().len(), 2);
    }

    #[test]
    fn wrong_channels_rejected() {
        let g = build_reference_config();
        let p = ModelParams::<f32>::init(&g, 3);
        let x = Tensor::zeros([1, 3, 224, 224]);
        assert!(forward(&g, &p, &x).is_err());
    }
}
