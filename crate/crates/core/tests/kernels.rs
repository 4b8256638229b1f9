mod common;

use common::*;
use defectnet::blocks::BlockSpec;
use defectnet::explore::{indicator_feasible, ConstraintSet};
use defectnet::graph::{build_reference_config, ArchGraph};
use defectnet::ConvSpec;

#[test]
fn conv_matches_direct_loop_on_grid() {
    let mut worst: f64 = 0.0;
    let mut seed = 0;
    for groups in [1, 2, 4] {
        for kernel in [1, 2, 3] {
            for stride in 1..=3 {
                for padding in 0..=2 {
                    let spec = ConvSpec {
                        in_channels: 2 * groups,
                        out_channels: 3 * groups,
                        kernel_h: kernel,
                        kernel_w: kernel,
                        stride,
                        padding,
                        groups,
                    };
                    for (h, w) in [(5, 5), (6, 7), (9, 4)] {
                        seed += 1;
                        worst = worst.max(conv_oracle_gap(&spec, 2, h, w, seed));
                    }
                }
            }
        }
    }
    assert!(worst < 1e-10, "max deviation {worst:e}");
}

#[test]
fn grouped_conv_example() {
    let spec = ConvSpec::same(8, 8, 3, 4);
    assert!(conv_oracle_gap(&spec, 2, 6, 6, 42) < 1e-10);
}

fn single_conv(c_in: usize, c_out: usize, side: usize) -> ArchGraph {
    let mut g = ArchGraph::new("single");
    let x = g.push(BlockSpec::Input { channels: c_in, height: side, width: side }, vec![], None);
    g.push(
        BlockSpec::Conv3x3 { in_channels: c_in, out_channels: c_out, stride: 1, groups: 1, relu: false },
        vec![x],
        None,
    );
    g
}

#[test]
fn flops_hand_counts() {
    // 2 * H * W * C_out * C_in * 9
    let hand = 2 * 224 * 224 * 16 * 3 * 9;
    assert_eq!(hand, 43_352_064);
    assert_eq!(single_conv(3, 16, 224).count_flops(224, 224).unwrap(), hand);
    assert_eq!(single_conv(3, 16, 224).count_params(), 16 * 3 * 9 + 16);
}

#[test]
fn reference_budgets() {
    let g = build_reference_config();
    let params = g.count_params();
    let flops = g.count_flops(224, 224).unwrap();
    assert!((700_000..=850_000).contains(&params), "{params} parameters");
    assert!(flops <= 100_000_000, "{flops} FLOPs");
    let f = indicator_feasible(&g, &ConstraintSet::default()).unwrap();
    assert!(f.feasible, "{:?}", f.violations);
}
