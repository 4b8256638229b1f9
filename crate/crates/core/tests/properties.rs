use defectnet::bench::{emit_table, parse_rows, speedup, BenchRow};
use defectnet::data::{self, Split};
use defectnet::explore::{self, indicator_feasible, ConstraintSet};
use defectnet::graph::{build_reference_config, reference_design, Checkpoint, ModelParams};
use defectnet::train::discrepancy;
use defectnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probs(rows: &[f64]) -> Tensor<f64> {
    let data: Vec<f64> = rows.iter().flat_map(|&p| [p, 1.0 - p]).collect();
    Tensor::new([rows.len(), 2], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn discrepancy_is_symmetric(a in prop::collection::vec(0.0..=1.0f64, 1..6), seed in any::<u64>()) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, p)| (p + (seed % 97) as f64 / 97.0 + i as f64 * 0.31) % 1.0).collect();
        let (pa, pb) = (probs(&a), probs(&b));
        let d = discrepancy(&pa, &pb).unwrap();
        prop_assert_eq!(d, discrepancy(&pb, &pa).unwrap());
        prop_assert_eq!(discrepancy(&pa, &pa).unwrap(), 0.0);
        prop_assert!((0.0..=1.0).contains(&d));
        if a != b {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn split_ignores_input_order(n_def in 2usize..12, n_clean in 2usize..12, seed in any::<u64>(), perm_seed in any::<u64>()) {
        let set = data::generate_sized(seed, n_def, n_clean, 16);
        let mut shuffled = set.clone();
        rand::seq::SliceRandom::shuffle(shuffled.samples.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let a = data::split(&set, seed).unwrap();
        let b = data::split(&shuffled, seed).unwrap();
        let tag = |s: &data::SampleSet| {
            let mut v: Vec<(String, Split)> = s.samples.iter().map(|x| (x.id.clone(), x.split)).collect();
            v.sort_by(|x, y| x.0.cmp(&y.0));
            v
        };
        prop_assert_eq!(tag(&a), tag(&b));
        let train = a.indices(Split::Train).len();
        prop_assert_eq!(train, (0.25 * (n_def + n_clean) as f64).round() as usize);
    }

    #[test]
    fn generated_pixels_in_unit_range(seed in any::<u64>(), index in 0u64..1000, defective in any::<bool>()) {
        let g = data::generate_one(seed, index, defective, 64);
        prop_assert!(g.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(g.clean.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn speedup_is_reciprocal(a in 1e-3..1e4f64, b in 1e-3..1e4f64) {
        let r = speedup(a, b).unwrap() * speedup(b, a).unwrap();
        prop_assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_csv_roundtrips(rows in prop::collection::vec(
        ("[A-Za-z][A-Za-z0-9 -]{0,12}", 0.1..100.0f64, 0.01..50.0f64, 1.0..10000.0f64, 0.1..200.0f64), 1..6)
    ) {
        let rows: Vec<BenchRow> = rows.into_iter().map(|(n, a, p, f, l)| BenchRow {
            model_name: n, accuracy_pct: a, params_m: p, flops_m: f, latency_ms: l,
        }).collect();
        let report = emit_table(&rows).unwrap();
        prop_assert_eq!(parse_rows(&report.csv).unwrap(), rows.clone());
        prop_assert_eq!(emit_table(&rows).unwrap().csv, report.csv);
    }

    #[test]
    fn flops_monotone_in_extent(side in 8usize..64) {
        let d = reference_design();
        let small = d.at_resolution(side).compile().unwrap();
        let large = d.at_resolution(side + 8).compile().unwrap();
        let fs = small.flops().unwrap();
        prop_assert_eq!(fs, small.node_flops(side, side).unwrap().iter().sum::<u64>());
        prop_assert!(large.flops().unwrap() > fs);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise(seed in any::<u64>()) {
        let g = reference_design().at_resolution(32).compile().unwrap();
        let ckpt = Checkpoint { params: ModelParams::init(&g, seed), graph: g, metadata: serde_json::json!({"seed": seed}) };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        for (a, b) in back.params.iter().zip(ckpt.params.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        prop_assert_eq!(again, buf);
    }
}

#[test]
fn flops_additive_over_nodes() {
    let g = build_reference_config();
    let per_node = g.node_flops(224, 224).unwrap();
    assert_eq!(per_node.len(), g.nodes.len());
    assert_eq!(per_node.iter().sum::<u64>(), g.count_flops(224, 224).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn mutation_chains_stay_valid(seed in any::<u64>(), start in 0usize..3, steps in 1usize..8, side in prop::sample::select(vec![32usize, 56, 224])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = explore::seed_designs()[start].clone().at_resolution(side);
        for _ in 0..steps {
            d = explore::mutate(&d, &mut rng).0;
            let g = d.compile().unwrap();
            prop_assert!(g.validate().is_ok(), "{:?}", g.validate());
            prop_assert!(indicator_feasible(&g, &ConstraintSet::default()).is_ok());
        }
    }
}
