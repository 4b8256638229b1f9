//! Independent oracles shared by the integration tests and the acceptance
//! runner: central finite differences and a direct-loop convolution.

#![allow(dead_code)]

use defectnet::blocks::{self, BlockSpec, HeadParams, Mode};
use defectnet::graph::{self, ArchGraph, ModelParams};
use defectnet::tensor::{self, ConvSpec, Tensor};
use defectnet::train;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// `||a - b|| / (||a|| + ||b||)`, 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb < 1e-300 {
        0.0
    } else {
        diff / (na + nb)
    }
}

/// Central-difference gradient of `f` w.r.t. every entry of `x`.
pub fn fd_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error over the block's inputs and parameters for the
/// scalar objective `sum(R * block(inputs))` with a random projection `R`.
pub fn check_block(block: &BlockSpec, input_shapes: &[Vec<usize>], seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = input_shapes.iter().map(|s| uniform(s, &mut r, -1.0, 1.0)).collect();
    let params: Vec<Tensor<f64>> = block
        .param_shapes()
        .iter()
        .map(|s| uniform(s, &mut r, -0.5, 0.5))
        .collect();
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let (out, cache) = block.forward(&refs, &params, Mode::Train).expect("forward");
    let proj = uniform(out.shape(), &mut r, -1.0, 1.0);
    let (gin, gparams) = block
        .backward(&refs, &params, &out, &cache, &proj, true)
        .expect("backward");
    let objective = |ins: &[Tensor<f64>], ps: &[Tensor<f64>]| {
        let refs: Vec<&Tensor<f64>> = ins.iter().collect();
        dot(&block.forward(&refs, ps, Mode::Train).expect("forward").0, &proj)
    };
    let mut worst: f64 = 0.0;
    for (k, g) in gin.iter().enumerate() {
        let g = g.as_ref().expect("input gradient");
        let num = fd_grad(&inputs[k], |x| {
            let mut ins = inputs.clone();
            ins[k] = x.clone();
            objective(&ins, &params)
        });
        worst = worst.max(rel_error(g.data(), &num));
    }
    for (k, g) in gparams.iter().enumerate() {
        let num = fd_grad(&params[k], |p| {
            let mut ps = params.clone();
            ps[k] = p.clone();
            objective(&inputs, &ps)
        });
        worst = worst.max(rel_error(g.data(), &num));
    }
    worst
}

/// Raw convolution kernel check (input, weight and bias gradients).
pub fn check_conv(spec: &ConvSpec, n: usize, h: usize, w: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&[n, spec.in_channels, h, w], &mut r, -1.0, 1.0);
    let wt = uniform(&spec.weight_shape(), &mut r, -1.0, 1.0);
    let b = uniform(&[spec.out_channels], &mut r, -1.0, 1.0);
    let y = tensor::conv2d_forward(&x, &wt, &b, spec).expect("conv");
    let proj = uniform(y.shape(), &mut r, -1.0, 1.0);
    let g = tensor::conv2d_backward(&proj, &x, &wt, spec).expect("conv backward");
    let f = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>| {
        dot(&tensor::conv2d_forward(x, wt, b, spec).expect("conv"), &proj)
    };
    let gx = fd_grad(&x, |x| f(x, &wt, &b));
    let gw = fd_grad(&wt, |wt| f(&x, wt, &b));
    let gb = fd_grad(&b, |b| f(&x, &wt, b));
    rel_error(g.input.expect("input grad").data(), &gx)
        .max(rel_error(g.weights.data(), &gw))
        .max(rel_error(g.bias.data(), &gb))
}

pub fn check_blur_pool(shape: &[usize], stride: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(shape, &mut r, -1.0, 1.0);
    let y = tensor::blur_pool(&x, stride).expect("blur_pool");
    let proj = uniform(y.shape(), &mut r, -1.0, 1.0);
    let g = tensor::blur_pool_backward(&proj, x.shape(), stride).expect("blur_pool backward");
    let num = fd_grad(&x, |x| dot(&tensor::blur_pool(x, stride).unwrap(), &proj));
    rel_error(g.data(), &num)
}

fn random_distribution(n: usize, c: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let logits = uniform(&[n, c], r, -2.0, 2.0);
    tensor::softmax(&logits).unwrap()
}

/// Dual head with the full loss on top, gradients w.r.t. features and both
/// heads' parameters.
pub fn check_dual_head_loss(n: usize, features: usize, lambda: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&[n, features], &mut r, -1.0, 1.0);
    let mk = |r: &mut ChaCha8Rng| HeadParams {
        weights: uniform(&[2, features], r, -1.0, 1.0),
        bias: uniform(&[2], r, -0.5, 0.5),
    };
    let h1 = mk(&mut r);
    let h2 = mk(&mut r);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
    let loss = |x: &Tensor<f64>, h1: &HeadParams<f64>, h2: &HeadParams<f64>| {
        let out = blocks::dual_head_forward(x, [h1, h2]).unwrap();
        train::total_loss(&out.p1, &out.p2, &out.p_agg, &labels, lambda)
            .unwrap()
            .loss
    };
    let out = blocks::dual_head_forward(&x, [&h1, &h2]).unwrap();
    let l = train::total_loss(&out.p1, &out.p2, &out.p_agg, &labels, lambda).unwrap();
    let (gx, [g1, g2]) =
        blocks::dual_head_backward(&x, [&h1, &h2], &out, &l.grad_p1, &l.grad_p2, &l.grad_agg).unwrap();
    let mut worst = rel_error(gx.data(), &fd_grad(&x, |x| loss(x, &h1, &h2)));
    let num = fd_grad(&h1.weights, |w| {
        loss(&x, &HeadParams { weights: w.clone(), bias: h1.bias.clone() }, &h2)
    });
    worst = worst.max(rel_error(g1.weights.data(), &num));
    let num = fd_grad(&h1.bias, |b| {
        loss(&x, &HeadParams { weights: h1.weights.clone(), bias: b.clone() }, &h2)
    });
    worst = worst.max(rel_error(g1.bias.data(), &num));
    let num = fd_grad(&h2.weights, |w| {
        loss(&x, &h1, &HeadParams { weights: w.clone(), bias: h2.bias.clone() })
    });
    worst = worst.max(rel_error(g2.weights.data(), &num));
    let num = fd_grad(&h2.bias, |b| {
        loss(&x, &h1, &HeadParams { weights: h2.weights.clone(), bias: b.clone() })
    });
    worst.max(rel_error(g2.bias.data(), &num))
}

/// total_loss alone, w.r.t. its three distribution arguments.
pub fn check_total_loss(n: usize, c: usize, lambda: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let p1 = random_distribution(n, c, &mut r);
    let p2 = random_distribution(n, c, &mut r);
    let pa = random_distribution(n, c, &mut r);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
    let l = train::total_loss(&p1, &p2, &pa, &labels, lambda).unwrap();
    let f = |a: &Tensor<f64>, b: &Tensor<f64>, g: &Tensor<f64>| {
        train::total_loss(a, b, g, &labels, lambda).unwrap().loss
    };
    rel_error(l.grad_p1.data(), &fd_grad(&p1, |x| f(x, &p2, &pa)))
        .max(rel_error(l.grad_p2.data(), &fd_grad(&p2, |x| f(&p1, x, &pa))))
        .max(rel_error(l.grad_agg.data(), &fd_grad(&pa, |x| f(&p1, &p2, x))))
}

/// Whole-graph check of the training loss w.r.t. parameters. At most
/// `per_tensor` entries of each tensor are probed.
pub fn check_graph(graph: &ArchGraph, n: usize, lambda: f64, per_tensor: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w) = graph.input_spec().expect("input");
    let x = uniform(&[n, c, h, w], &mut r, 0.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
    let mut params = ModelParams::<f64>::init(graph, seed);
    // perturbed biases and scales so every path carries signal
    for t in params.iter_mut() {
        if t.rank() == 1 {
            let d = uniform(t.shape(), &mut r, -0.1, 0.1);
            t.add_assign(&d).unwrap();
        }
    }
    let (_, grads) = train::loss_and_grads(graph, &params, &x, &labels, lambda).unwrap();
    let loss = |p: &ModelParams<f64>| {
        let out = graph::forward_trace(graph, p, &x, Mode::Train).unwrap();
        train::total_loss(out.p1(), out.p2(), out.p_agg(), &labels, lambda)
            .unwrap()
            .loss
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = params.clone();
    for node in 0..params.nodes.len() {
        for t in 0..params.nodes[node].len() {
            let len = params.nodes[node][t].len();
            for _ in 0..per_tensor.min(len) {
                let i = r.gen_range(0..len);
                let orig = probe.nodes[node][t].data()[i];
                probe.nodes[node][t].data_mut()[i] = orig + FD_STEP;
                let up = loss(&probe);
                probe.nodes[node][t].data_mut()[i] = orig - FD_STEP;
                let down = loss(&probe);
                probe.nodes[node][t].data_mut()[i] = orig;
                numeric.push((up - down) / (2.0 * FD_STEP));
                analytic.push(grads.nodes[node][t].data()[i]);
            }
        }
    }
    rel_error(&analytic, &numeric)
}

/// Direct seven-loop convolution (cross-correlation, zero padding, groups).
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: &ConvSpec) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4("naive").unwrap();
    assert_eq!(c, s.in_channels);
    let ho = (h + 2 * s.padding - s.kernel_h) / s.stride + 1;
    let wo = (wd + 2 * s.padding - s.kernel_w) / s.stride + 1;
    let cig = s.in_channels / s.groups;
    let cog = s.out_channels / s.groups;
    let mut out = Tensor::zeros([n, s.out_channels, ho, wo]);
    let xd = x.data();
    let wdat = w.data();
    for img in 0..n {
        for oc in 0..s.out_channels {
            let g = oc / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[oc];
                    for ic in 0..cig {
                        for ky in 0..s.kernel_h {
                            for kx in 0..s.kernel_w {
                                let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let ch = g * cig + ic;
                                acc += xd[((img * c + ch) * h + iy as usize) * wd + ix as usize]
                                    * wdat[((oc * cig + ic) * s.kernel_h + ky) * s.kernel_w + kx];
                            }
                        }
                    }
                    out.data_mut()[((img * s.out_channels + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Max abs deviation of `conv2d_forward` from the direct loop.
pub fn conv_oracle_gap(spec: &ConvSpec, n: usize, h: usize, w: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&[n, spec.in_channels, h, w], &mut r, -1.0, 1.0);
    let wt = uniform(&spec.weight_shape(), &mut r, -1.0, 1.0);
    let b = uniform(&[spec.out_channels], &mut r, -1.0, 1.0);
    let fast = tensor::conv2d_forward(&x, &wt, &b, spec).unwrap();
    let slow = naive_conv(&x, &wt, &b, spec);
    assert_eq!(fast.shape(), slow.shape());
    fast.max_abs_diff(&slow)
}

/// A random small conv configuration drawn from `r`.
pub fn random_conv_spec(r: &mut ChaCha8Rng) -> (ConvSpec, usize, usize) {
    let groups = [1, 1, 2, 3][r.gen_range(0..4)];
    let in_channels = groups * r.gen_range(1..4);
    let out_channels = groups * r.gen_range(1..4);
    let k = [1, 2, 3][r.gen_range(0..3)];
    let spec = ConvSpec {
        in_channels,
        out_channels,
        kernel_h: k,
        kernel_w: k,
        stride: r.gen_range(1..4),
        padding: r.gen_range(0..3),
        groups,
    };
    let h = r.gen_range(k.max(2)..9);
    let w = r.gen_range(k.max(2)..9);
    (spec, h, w)
}
