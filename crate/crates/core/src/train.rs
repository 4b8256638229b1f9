//! Loss, optimizer and the training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SampleSet, Split};
use crate::error::{Error, Result};
use crate::blocks::Mode;
use crate::graph::{self, ArchGraph, ModelParams, Trace};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_disc: f64,
    /// Epochs over which the discrepancy weight ramps linearly up to `lambda_disc`.
    pub lambda_warmup_epochs: usize,
    pub seed: u64,
    /// Evaluate test accuracy every this many epochs (the last epoch is
    /// always evaluated); 0 evaluates only at the end.
    pub eval_every: usize,
    /// Apply a random symmetry of the square to every training image.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 5,
            learning_rate: 1e-3,
            lambda_disc: 0.1,
            lambda_warmup_epochs: 10,
            seed: 0,
            eval_every: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train", "epochs and batch_size must be at least 1"));
        }
        if !(self.lambda_disc >= 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::invalid(
                "train",
                "lambda_disc and learning_rate must be non-negative",
            ));
        }
        Ok(())
    }

    /// Discrepancy weight in effect during `epoch` (0-based).
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if self.lambda_warmup_epochs == 0 {
            return self.lambda_disc;
        }
        self.lambda_disc * (epoch as f64 / self.lambda_warmup_epochs as f64).min(1.0)
    }
}

fn check_probs<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, c) = a.dims2(op)?;
    b.expect_shape(op, a.shape())?;
    if c == 0 {
        return Err(Error::invalid(op, "no classes"));
    }
    Ok((n, c))
}

/// Mean over the batch of `(1/C) * sum_c |p1_c - p2_c|`.
pub fn discrepancy<T: Real>(p1: &Tensor<T>, p2: &Tensor<T>) -> Result<f64> {
    let (n, c) = check_probs("discrepancy", p1, p2)?;
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = p1
        .data()
        .iter()
        .zip(p2.data())
        .map(|(&a, &b)| (a - b).abs().to_f64())
        .sum();
    Ok(total / (n * c) as f64)
}

/// Loss value, its parts and the gradients w.r.t. the three distributions.
#[derive(Debug, Clone)]
pub struct LossOutput<T: Real> {
    pub loss: f64,
    pub cross_entropy: f64,
    pub discrepancy: f64,
    /// Samples whose true-class probability hit [`PROB_FLOOR`].
    pub clamped: usize,
    pub grad_p1: Tensor<T>,
    pub grad_p2: Tensor<T>,
    pub grad_agg: Tensor<T>,
}

/// `CE(p_agg, labels) - lambda * discrepancy(p1, p2)`, averaged over the batch.
pub fn total_loss<T: Real>(
    p1: &Tensor<T>,
    p2: &Tensor<T>,
    p_agg: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<LossOutput<T>> {
    let (n, c) = check_probs("total_loss", p1, p2)?;
    p_agg.expect_shape("total_loss", p1.shape())?;
    if labels.len() != n {
        return Err(Error::shape("total_loss", "labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid("total_loss", format!("label {bad} outside {c} classes")));
    }
    let mut grad_agg = Tensor::zeros([n, c]);
    let mut ce = 0.0;
    let mut clamped = 0;
    let inv_n = 1.0 / n.max(1) as f64;
    for (i, &y) in labels.iter().enumerate() {
        let p = p_agg.data()[i * c + y].to_f64();
        if p <= PROB_FLOOR {
            clamped += 1;
            ce -= PROB_FLOOR.ln();
        } else {
            ce -= p.ln();
            grad_agg.data_mut()[i * c + y] = T::from_f64(-inv_n / p);
        }
    }
    if clamped > 0 {
        log::warn!("total_loss: clamped {clamped} true-class probabilities at {PROB_FLOOR:e}");
    }
    ce *= inv_n;
    let disc = discrepancy(p1, p2)?;
    let scale = lambda / (n.max(1) * c) as f64;
    let mut grad_p1 = Tensor::zeros([n, c]);
    for ((g, &a), &b) in grad_p1.data_mut().iter_mut().zip(p1.data()).zip(p2.data()) {
        *g = T::from_f64(-scale) * (a - b).signum_or_zero();
    }
    let grad_p2 = grad_p1.scale(-T::ONE);
    Ok(LossOutput {
        loss: ce - lambda * disc,
        cross_entropy: ce,
        discrepancy: disc,
        clamped,
        grad_p1,
        grad_p2,
        grad_agg,
    })
}

/// `w <- w - lr * grad` for every tensor, then clears the gradients.
pub fn sgd_step<T: Real>(params: &mut ModelParams<T>, grads: &mut ModelParams<T>, lr: f64) -> Result<()> {
    if params.nodes.len() != grads.nodes.len() {
        return Err(Error::shape(
            "sgd_step",
            "node count",
            params.nodes.len(),
            grads.nodes.len(),
        ));
    }
    let lr = T::from_f64(lr);
    for (p, g) in params.iter_mut().zip(grads.iter_mut()) {
        p.expect_shape("sgd_step", g.shape())?;
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * *d;
        }
        g.fill(T::ZERO);
    }
    Ok(())
}

/// One forward/backward pass on a batch; returns the loss and gradients.
pub fn loss_and_grads<T: Real>(
    graph: &ArchGraph,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<(LossOutput<T>, ModelParams<T>)> {
    let (loss, grads, _) = traced_loss_and_grads(graph, params, x, labels, lambda)?;
    Ok((loss, grads))
}

fn traced_loss_and_grads<T: Real>(
    graph: &ArchGraph,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<(LossOutput<T>, ModelParams<T>, Trace<T>)> {
    let trace = graph::forward_trace(graph, params, x, Mode::Train)?;
    let loss = total_loss(trace.p1(), trace.p2(), trace.p_agg(), labels, lambda)?;
    let grads = graph::backward(
        graph,
        params,
        &trace,
        Some(&loss.grad_p1),
        Some(&loss.grad_p2),
        Some(&loss.grad_agg),
    )?;
    Ok((loss, grads, trace))
}

/// One SGD update on a batch, including the running statistics of any
/// normalization nodes. Returns the batch loss.
pub fn train_step<T: Real>(
    graph: &ArchGraph,
    params: &mut ModelParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
    lr: f64,
) -> Result<LossOutput<T>> {
    let (loss, mut grads, trace) = traced_loss_and_grads(graph, params, x, labels, lambda)?;
    if loss.loss.is_finite() {
        sgd_step(params, &mut grads, lr)?;
        graph::update_running_stats(params, &trace);
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Test accuracy in percent, when evaluated this epoch.
    pub test_acc: Option<f64>,
}

/// Accuracy (percent) of the model on the given samples.
pub fn evaluate(
    graph: &ArchGraph,
    params: &ModelParams<f32>,
    data: &SampleSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let pred = graph::predict(graph, params, &x)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(100.0 * correct as f64 / indices.len() as f64)
}

/// Replace the running statistics of every batch-norm node with statistics
/// pooled over `indices` (forward passes in training mode, `batch_size`
/// samples at a time). Exact when no batch-norm node feeds another.
pub fn recalibrate_norm_stats(
    graph: &ArchGraph,
    params: &mut ModelParams<f32>,
    data: &SampleSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<()> {
    let mut acc: Vec<Option<(f64, Vec<f64>, Vec<f64>)>> = vec![None; graph.nodes.len()];
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk)?;
        let trace = graph::forward_trace(graph, params, &x, Mode::Train)?;
        for (id, mean, var, count) in trace.norm_stats() {
            // only batch norm carries running statistics
            if params.nodes[id].len() < 4 {
                continue;
            }
            let (n, s1, s2) = acc[id].get_or_insert_with(|| (0.0, vec![0.0; mean.len()], vec![0.0; mean.len()]));
            *n += count;
            for c in 0..mean.len() {
                // running sums of x and x^2 recovered from the batch moments
                s1[c] += mean[c] * count;
                s2[c] += (var[c] * (count - 1.0) + mean[c] * mean[c] * count).max(0.0);
            }
        }
    }
    for (id, a) in acc.into_iter().enumerate() {
        let Some((n, s1, s2)) = a else { continue };
        let node = &mut params.nodes[id];
        for c in 0..s1.len() {
            let mean = s1[c] / n;
            let var = (s2[c] - n * mean * mean) / (n - 1.0).max(1.0);
            node[2].data_mut()[c] = mean as f32;
            node[3].data_mut()[c] = var.max(0.0) as f32;
        }
    }
    Ok(())
}

/// Copy of a `(N, C, H, W)` batch translated by `(dy, dx)` pixels; pixels
/// shifted in from outside replicate the nearest edge.
pub fn shift_batch(x: &Tensor<f32>, dy: isize, dx: isize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims4("shift")?;
    let src = x.data();
    Ok(Tensor::from_fn([n, c, h, w], |i| {
        let (plane, rem) = (i / (h * w), i % (h * w));
        let (y, xx) = ((rem / w) as isize, (rem % w) as isize);
        let sy = (y - dy).clamp(0, h as isize - 1) as usize;
        let sx = (xx - dx).clamp(0, w as isize - 1) as usize;
        src[plane * h * w + sy * w + sx]
    }))
}

/// Fraction of (sample, shift) pairs whose predicted class changes when the
/// image moves one pixel right or one pixel down.
pub fn shift_flip_rate(
    graph: &ArchGraph,
    params: &ModelParams<f32>,
    data: &SampleSet,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut flips = 0;
    for chunk in indices.chunks(10) {
        let (x, _) = data.batch(chunk)?;
        let base = graph::predict(graph, params, &x)?;
        for (dy, dx) in [(0, 1), (1, 0)] {
            let moved = graph::predict(graph, params, &shift_batch(&x, dy, dx)?)?;
            flips += base.iter().zip(&moved).filter(|(a, b)| a != b).count();
        }
    }
    Ok(flips as f64 / (2 * indices.len()) as f64)
}

/// Train from a seeded initialization. The dataset must already be split.
pub fn train(
    graph: &ArchGraph,
    data: &SampleSet,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, Vec<EpochStats>)> {
    let params = ModelParams::init(graph, cfg.seed);
    train_from(graph, params, data, cfg)
}

pub fn train_from(
    graph: &ArchGraph,
    mut params: ModelParams<f32>,
    data: &SampleSet,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, Vec<EpochStats>)> {
    cfg.validate()?;
    graph.validate()?;
    params.check(graph)?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid("train", "training split is empty"));
    }
    let test_idx = data.indices(Split::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lambda = cfg.lambda_at(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, labels) = data.batch(chunk)?;
            if cfg.augment {
                for i in 0..chunk.len() {
                    crate::data::dihedral_in_place(&mut x, i, rng.gen_range(0..8))?;
                }
            }
            let loss = train_step(graph, &mut params, &x, &labels, lambda, cfg.learning_rate)?;
            if !loss.loss.is_finite() {
                return Err(Error::invalid(
                    "train",
                    format!("non-finite loss at epoch {epoch}"),
                ));
            }
            total += loss.loss;
            batches += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if last || due {
            recalibrate_norm_stats(graph, &mut params, data, &train_idx, 10)?;
        }
        let test_acc = if (last || due) && !test_idx.is_empty() {
            Some(evaluate(graph, &params, data, &test_idx, 10)?)
        } else {
            None
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: total / batches as f64,
            test_acc,
        };
        log::info!(
            "epoch {:>3}  loss {:.5}  lambda {:.3}  test_acc {}",
            stats.epoch,
            stats.loss,
            lambda,
            stats.test_acc.map_or("-".to_string(), |a| format!("{a:.2}%"))
        );
        history.push(stats);
    }
    Ok((params, history))
}

/// History as CSV: `epoch,loss,test_acc` (empty accuracy when not evaluated).
pub fn write_history<W: Write>(out: W, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for h in history {
        w.serialize(h)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new([rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn discrepancy_examples() {
        let a = t(&[[1.0, 0.0]]);
        let b = t(&[[0.0, 1.0]]);
        assert_eq!(discrepancy(&a, &a).unwrap(), 0.0);
        assert_eq!(discrepancy(&a, &b).unwrap(), 1.0);
        let d = discrepancy(&t(&[[0.9, 0.1]]), &t(&[[0.6, 0.4]])).unwrap();
        assert!((d - 0.3).abs() < 1e-12);
        assert!(discrepancy(&a, &t(&[[1.0, 0.0], [1.0, 0.0]])).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let p = t(&[[0.0, 1.0]]);
        let out = total_loss(&p, &p, &p, &[1], 0.0).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let p = t(&[[0.0, 1.0]]);
        let out = total_loss(&p, &p, &p, &[0], 0.0).unwrap();
        assert_eq!(out.clamped, 1);
        assert!((out.loss + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = ModelParams {
            nodes: vec![vec![Tensor::<f64>::scalar(1.0)]],
        };
        let mut g = ModelParams {
            nodes: vec![vec![Tensor::<f64>::scalar(2.0)]],
        };
        sgd_step(&mut p, &mut g, 0.1).unwrap();
        assert!((p.nodes[0][0].data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(g.nodes[0][0].data()[0], 0.0);
    }

    #[test]
    fn defaults_and_warmup() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate), (100, 5, 1e-3));
        assert_eq!(c.lambda_at(0), 0.0);
        assert!((c.lambda_at(5) - 0.05).abs() < 1e-12);
        assert_eq!(c.lambda_at(50), 0.1);
    }
}
