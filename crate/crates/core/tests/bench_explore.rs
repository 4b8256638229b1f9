use std::sync::atomic::{AtomicUsize, Ordering};

use defectnet::bench::{self, emit_table, format_value, published_rows, BenchRow, LatencyConfig};
use defectnet::blocks::BlockSpec;
use defectnet::explore::{
    self, indicator_feasible, search_with, universal_performance, Constraint, ConstraintSet,
    SearchConfig, SearchObjective,
};
use defectnet::graph::{build_reference_config, reference_design, Downsample, ModelParams};

#[test]
fn published_table_renders_with_subject_best_everywhere() {
    let rows = published_rows();
    assert_eq!(rows.len(), 5);
    let report = emit_table(&rows).unwrap();
    let last = report
        .text
        .lines()
        .find(|l| l.starts_with(&rows[4].model_name))
        .unwrap();
    for cell in ["**98.2**", "**0.77**", "**93**", "**10**"] {
        assert!(last.contains(cell), "{last}");
    }
    let bold_rows = report.text.lines().filter(|l| l.contains("**")).count();
    assert_eq!(bold_rows, 1, "{}", report.text);
    for v in ["92.8", "25.6", "8200", "83", "98.0", "5.3", "780", "88", "89.4", "3.9", "630", "89", "97.8", "5.4", "438", "56"] {
        assert!(report.text.contains(v), "{v} missing");
    }
    let header = report.text.lines().next().unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, ["Model", "Acc(%)", "Param(M)", "FLOPs(M)", "Inf.Speed(ms)"]);
}

#[test]
fn published_ratios() {
    let report = emit_table(&published_rows()).unwrap();
    let r = |name: &str| report.ratios.iter().find(|r| r.baseline.starts_with(name)).unwrap();
    let one = |v: f64| format!("{v:.1}");
    assert_eq!(bench::format_ratio_approx(r("ResNet").params), "~33×");
    assert_eq!(bench::format_ratio_approx(r("ResNet").flops), "~88×");
    assert_eq!(one(r("ResNet").params), "33.2");
    assert_eq!(one(r("ResNet").flops), "88.2");
    assert_eq!(one(r("EfficientNet").flops), "8.4");
    assert_eq!(one(r("EfficientNet").params), "6.9");
    assert_eq!(one(r("ResNet").speed), "8.3");
    assert_eq!(one(r("EfficientNet").speed), "8.8");
    assert_eq!(one(r("MobileNetV3").speed), "5.6");
    assert!(report.text.contains("8.8×"));
}

#[test]
fn measured_flops_appear_in_table() {
    let g = build_reference_config();
    let flops_m = g.count_flops(224, 224).unwrap() as f64 / 1e6;
    assert!(flops_m <= 100.0);
    let mut rows = published_rows();
    rows.push(BenchRow {
        model_name: "reference (this build)".into(),
        accuracy_pct: 98.0,
        params_m: g.count_params() as f64 / 1e6,
        flops_m,
        latency_ms: 3.0,
    });
    let report = emit_table(&rows).unwrap();
    assert!(report.text.contains(&format_value(flops_m)));
    assert!(bench::parse_rows(&report.csv).unwrap()[5].flops_m == flops_m);
}

#[test]
fn latency_benchmark_runs_and_validates() {
    let g = reference_design().at_resolution(32).compile().unwrap();
    let p = ModelParams::init(&g, 1);
    let cfg = LatencyConfig { batch_size: 2, warmup_iters: 1, timed_iters: 5 };
    let s = bench::benchmark_latency(&g, &p, &cfg).unwrap();
    assert_eq!(s.iterations, 5);
    assert!(s.median_batch_ms > 0.0 && s.p95_batch_ms >= s.median_batch_ms);
    assert!((s.per_sample_ms - s.median_batch_ms / 2.0).abs() < 1e-12);
    let short = LatencyConfig { timed_iters: 2, ..cfg };
    assert!(bench::benchmark_latency(&g, &p, &short).is_err());
    assert_eq!(LatencyConfig::default(), LatencyConfig { batch_size: 10, warmup_iters: 10, timed_iters: 100 });
}

#[test]
fn table_row_universal_performance() {
    let obj = SearchObjective::default();
    let u = universal_performance(98.2, 0.77e6, 93e6, &obj).unwrap();
    // closed form: 20 (2 log a - 0.5 log p - 0.5 log m)
    let oracle = 40.0 * 98.2f64.log10() - 10.0 * 0.77f64.log10() - 10.0 * 93f64.log10();
    assert!((u - oracle).abs() < 1e-9);
    assert!((u - 61.1).abs() < 0.05, "{u}");
}

#[test]
fn strided_pointwise_and_late_maxpool_are_infeasible() {
    let c = ConstraintSet::default();

    let mut d = reference_design();
    d.stages[2].downsample = Some(Downsample::StridedPointwise { out: 112 });
    let g = d.compile().unwrap();
    let f = indicator_feasible(&g, &c).unwrap();
    assert!(!f.feasible);
    let v = f
        .violations
        .iter()
        .find(|v| v.constraint == Constraint::ForbidPointwiseStrided)
        .unwrap();
    let node = v.node.unwrap();
    assert!(matches!(g.nodes[node].block, BlockSpec::Conv1x1 { stride: 2, .. }));

    let mut d = reference_design();
    d.stages[2].downsample = Some(Downsample::MaxPool);
    let g = d.compile().unwrap();
    let f = indicator_feasible(&g, &c).unwrap();
    assert!(!f.feasible);
    assert_eq!(f.violations.len(), 1);
    assert_eq!(f.violations[0].constraint, Constraint::AadsOnlyDownsampling);
    assert!(matches!(g.nodes[f.violations[0].node.unwrap()].block, BlockSpec::MaxPool { .. }));

    let tight = ConstraintSet { max_flops: 1_000_000, ..c };
    let f = indicator_feasible(&build_reference_config(), &tight).unwrap();
    assert_eq!(f.violations[0].constraint, Constraint::MaxFlops);
}

/// Deterministic stand-in for proxy training: rewards width, penalizes nothing.
fn fake_accuracy(d: &defectnet::graph::Design) -> f64 {
    let width: usize = d.stages.iter().map(|s| s.out_channels).sum();
    50.0 + (width % 450) as f64 / 10.0
}

#[test]
fn search_only_trains_feasible_designs_and_is_reproducible() {
    let cfg = SearchConfig { seed: 9, generations: 5, population: 8, offspring: 12, max_mutations: 3, ..Default::default() };
    let calls = AtomicUsize::new(0);
    let eval = |d: &defectnet::graph::Design| {
        calls.fetch_add(1, Ordering::SeqCst);
        let f = indicator_feasible(&d.compile().unwrap(), &cfg.constraints).unwrap();
        assert!(f.feasible, "evaluator called on infeasible design");
        Ok(fake_accuracy(d))
    };
    let a = search_with(&explore::seed_designs(), &cfg, eval).unwrap();
    assert!(calls.load(Ordering::SeqCst) > 0);
    let infeasible: usize = a.log.iter().map(|g| g.entries.iter().filter(|e| !e.feasible).count()).sum();
    assert!(infeasible > 0, "mutations never produced an infeasible design");

    let mut last = f64::MIN;
    for g in &a.log {
        assert!(g.best_score >= last);
        last = g.best_score;
        for e in &g.entries {
            assert_eq!(e.feasible, e.violations.is_empty());
            if e.admitted {
                assert!(e.feasible);
            }
            if !e.feasible {
                assert!(e.score.is_none());
            }
        }
    }
    for c in &a.population {
        let g = c.design.compile().unwrap();
        assert!(indicator_feasible(&g, &cfg.constraints).unwrap().feasible);
        assert!(c.flops <= cfg.constraints.max_flops);
    }

    let b = search_with(&explore::seed_designs(), &cfg, |d| Ok(fake_accuracy(d))).unwrap();
    assert_eq!(a.log_jsonl(), b.log_jsonl());
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    a.write_run(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("generations.jsonl")).unwrap();
    assert_eq!(text.lines().count(), cfg.generations + 1);
}

#[test]
fn infeasible_seed_is_rejected() {
    let bad = reference_design().with_downsampling(Downsample::MaxPool);
    let err = search_with(&[bad], &SearchConfig::default(), |_| Ok(90.0)).unwrap_err();
    assert!(err.to_string().contains("infeasible"), "{err}");
}

#[test]
fn never_admits_over_budget_graphs_for_any_seed() {
    for seed in 0..6 {
        let cfg = SearchConfig {
            seed,
            generations: 3,
            offspring: 10,
            constraints: ConstraintSet { max_flops: 95_000_000, ..Default::default() },
            ..Default::default()
        };
        let s = search_with(&explore::seed_designs(), &cfg, |d| Ok(fake_accuracy(d))).unwrap();
        for g in &s.log {
            for e in g.entries.iter().filter(|e| e.admitted) {
                assert!(e.flops <= cfg.constraints.max_flops);
            }
        }
    }
}
