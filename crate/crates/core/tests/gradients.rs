mod common;

use common::*;
use defectnet::blocks::{BlockSpec, VacSpec};
use defectnet::graph::{reference_design, ArchGraph};
use rand::Rng;

const SHAPES: u64 = 20;

fn assert_tol(what: &str, err: f64) {
    assert!(err < GRAD_TOL, "{what}: relative error {err:e}");
}

#[test]
fn conv_kernel_gradients() {
    let mut r = rng(100);
    for i in 0..SHAPES {
        let (spec, h, w) = random_conv_spec(&mut r);
        let n = r.gen_range(1..3);
        assert_tol(&format!("conv {spec:?} {h}x{w}"), check_conv(&spec, n, h, w, i));
    }
}

#[test]
fn conv_block_gradients() {
    let mut r = rng(101);
    for i in 0..SHAPES {
        let g = [1, 2][r.gen_range(0..2)];
        let cin = g * r.gen_range(1..4);
        let cout = g * r.gen_range(1..4);
        let (h, w) = (r.gen_range(3..8), r.gen_range(3..8));
        let n = r.gen_range(1..3);
        let stride = r.gen_range(1..3);
        let relu = r.gen_bool(0.5);
        let blocks = [
            BlockSpec::Conv3x3 { in_channels: cin, out_channels: cout, stride, groups: g, relu },
            BlockSpec::ConvDepthwise { channels: cin, stride, relu },
            BlockSpec::Conv1x1 { in_channels: cin, out_channels: cout, stride: 1, relu },
        ];
        for b in &blocks {
            assert_tol(&format!("{b:?}"), check_block(b, &[vec![n, cin, h, w]], i));
        }
    }
}

#[test]
fn blur_pool_gradients() {
    let mut r = rng(102);
    for i in 0..SHAPES {
        let shape = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(2..9), r.gen_range(2..9)];
        let stride = r.gen_range(2..4);
        assert_tol(&format!("blur_pool {shape:?}/{stride}"), check_blur_pool(&shape, stride, i));
    }
}

#[test]
fn aads_block_gradients() {
    let mut r = rng(103);
    for i in 0..SHAPES {
        let cin = r.gen_range(1..4);
        let (h, w) = (r.gen_range(2..9), r.gen_range(2..9));
        let conv = r.gen_bool(0.5);
        let cout = if conv { r.gen_range(1..4) } else { cin };
        let b = BlockSpec::AadsDown { in_channels: cin, out_channels: cout, conv };
        assert_tol(&format!("{b:?} {h}x{w}"), check_block(&b, &[vec![2, cin, h, w]], i));
    }
}

#[test]
fn vac_gradients() {
    let mut r = rng(104);
    // the 1x4x8x8 case first
    let spec = VacSpec { channels: 4, condense_stride: 2, embed_groups: 2, embed_channels: 4 };
    assert_tol("vac 1x4x8x8", check_block(&BlockSpec::Vac(spec), &[vec![1, 4, 8, 8]], 0));
    for i in 0..SHAPES {
        let g = r.gen_range(1..3);
        let spec = VacSpec {
            channels: g * r.gen_range(1..3),
            condense_stride: r.gen_range(2..4),
            embed_groups: g,
            embed_channels: g * r.gen_range(1..3),
        };
        let s = spec.condense_stride;
        let (h, w) = (s * r.gen_range(1..4), s * r.gen_range(1..4));
        let shape = vec![r.gen_range(1..3), spec.channels, h, w];
        assert_tol(&format!("{spec:?} {shape:?}"), check_block(&BlockSpec::Vac(spec), &[shape], i));
    }
}

#[test]
fn structural_block_gradients() {
    let mut r = rng(105);
    for i in 0..SHAPES {
        let n = r.gen_range(1..3);
        let (c1, c2) = (r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(2..7), r.gen_range(2..7));
        let f = r.gen_range(1..6);
        let k = r.gen_range(1..3);
        let cases: Vec<(BlockSpec, Vec<Vec<usize>>)> = vec![
            (BlockSpec::MaxPool { kernel: k, stride: k }, vec![vec![n, c1, h.max(k), w.max(k)]]),
            (BlockSpec::Concat, vec![vec![n, c1, h, w], vec![n, c2, h, w]]),
            (BlockSpec::Add, vec![vec![n, c1, h, w], vec![n, c1, h, w]]),
            (BlockSpec::Gap, vec![vec![n, c1, h, w]]),
            (BlockSpec::FcHead { in_features: f, classes: 2 }, vec![vec![n, f]]),
            (BlockSpec::Aggregate, vec![vec![n, 2], vec![n, 2]]),
        ];
        for (b, shapes) in &cases {
            assert_tol(&format!("{b:?} {shapes:?}"), check_block(b, shapes, i));
        }
    }
}

#[test]
fn normalization_gradients() {
    let mut r = rng(107);
    for i in 0..SHAPES {
        let n = r.gen_range(2..4);
        let g = r.gen_range(1..4);
        let c = g * r.gen_range(1..4);
        let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
        let relu = r.gen_bool(0.5);
        let cases: Vec<(BlockSpec, Vec<usize>)> = vec![
            (BlockSpec::BatchNorm { channels: c, relu }, vec![n, c, h, w]),
            (BlockSpec::BatchNorm { channels: c, relu }, vec![n, c]),
            (BlockSpec::GroupNorm { channels: c, groups: g, relu }, vec![n, c, h, w]),
        ];
        for (b, shape) in cases {
            assert_tol(&format!("{b:?} {shape:?}"), check_block(&b, &[shape], i));
        }
    }
}

#[test]
fn dual_head_and_loss_gradients() {
    let mut r = rng(106);
    for i in 0..SHAPES {
        let n = r.gen_range(1..6);
        let f = r.gen_range(1..8);
        let lambda = [0.0, 0.1, 0.5][r.gen_range(0..3)];
        assert_tol("dual head + loss", check_dual_head_loss(n, f, lambda, i));
        assert_tol("total_loss", check_total_loss(n, r.gen_range(2..5), lambda, i));
    }
}

fn toy_graph() -> ArchGraph {
    let mut g = ArchGraph::new("toy");
    let x = g.push(BlockSpec::Input { channels: 2, height: 4, width: 4 }, vec![], None);
    let c = g.push(
        BlockSpec::Conv3x3 { in_channels: 2, out_channels: 3, stride: 1, groups: 1, relu: true },
        vec![x],
        None,
    );
    let gap = g.push(BlockSpec::Gap, vec![c], None);
    let fc = BlockSpec::FcHead { in_features: 3, classes: 2 };
    let h1 = g.push(fc, vec![gap], Some(0));
    let h2 = g.push(fc, vec![gap], Some(1));
    g.push(BlockSpec::Aggregate, vec![h1, h2], None);
    g
}

#[test]
fn toy_graph_gradient() {
    let g = toy_graph();
    g.validate().unwrap();
    assert_tol("toy graph", check_graph(&g, 3, 0.1, usize::MAX, 7));
}

#[test]
fn reference_topology_gradient_at_small_resolution() {
    let g = reference_design().at_resolution(32).compile().unwrap();
    g.validate().unwrap();
    assert_tol("reference@32", check_graph(&g, 2, 0.1, 3, 11));
}
