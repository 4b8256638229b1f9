//! Latency measurement and comparison tables.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, ArchGraph, ModelParams};
use crate::tensor::Tensor;

/// Published comparison rows (accuracy, size, cost and ARM latency).
pub const PUBLISHED_TABLE: &str = include_str!("../data/table1.csv");

/// Jitter (p95 / median) above which a timing run is flagged as noisy.
pub const JITTER_LIMIT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "Model")]
    pub model_name: String,
    #[serde(rename = "Acc(%)")]
    pub accuracy_pct: f64,
    #[serde(rename = "Param(M)")]
    pub params_m: f64,
    #[serde(rename = "FLOPs(M)")]
    pub flops_m: f64,
    #[serde(rename = "Inf.Speed(ms)")]
    pub latency_ms: f64,
}

impl BenchRow {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.accuracy_pct,
            self.params_m,
            self.flops_m,
            self.latency_ms,
        ];
        if fields.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(
                "bench row",
                format!("{}: every numeric field must be positive", self.model_name),
            ))
        }
    }
}

pub fn parse_rows(csv_text: &str) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let mut rows = Vec::new();
    for row in r.deserialize() {
        let row: BenchRow = row?;
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn published_rows() -> Vec<BenchRow> {
    parse_rows(PUBLISHED_TABLE).expect("bundled table parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyConfig {
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            batch_size: 10,
            warmup_iters: 10,
            timed_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub batch_size: usize,
    pub iterations: usize,
    pub median_batch_ms: f64,
    pub p95_batch_ms: f64,
    /// Median batch time divided by the batch size.
    pub per_sample_ms: f64,
    /// p95 / median of the batch times.
    pub jitter: f64,
    pub total_ms: f64,
}

/// Nearest-rank percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Summary statistics over per-batch wall-clock times.
pub fn latency_stats(batch_ms: &[f64], batch_size: usize) -> Result<LatencyStats> {
    if batch_ms.len() < 3 {
        return Err(Error::invalid(
            "benchmark_latency",
            format!("need at least 3 timed iterations, got {}", batch_ms.len()),
        ));
    }
    if batch_size == 0 {
        return Err(Error::invalid("benchmark_latency", "batch size must be at least 1"));
    }
    let mut sorted = batch_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let p95 = percentile(&sorted, 0.95);
    Ok(LatencyStats {
        batch_size,
        iterations: batch_ms.len(),
        median_batch_ms: med,
        p95_batch_ms: p95,
        per_sample_ms: med / batch_size as f64,
        jitter: if med > 0.0 { p95 / med } else { 1.0 },
        total_ms: batch_ms.iter().sum(),
    })
}

/// Time inference on a fixed batch at the graph's input size. The loop runs
/// on a single worker thread.
pub fn benchmark_latency(
    graph: &ArchGraph,
    params: &ModelParams<f32>,
    cfg: &LatencyConfig,
) -> Result<LatencyStats> {
    if cfg.timed_iters < 3 {
        return Err(Error::invalid(
            "benchmark_latency",
            format!("need at least 3 timed iterations, got {}", cfg.timed_iters),
        ));
    }
    let (c, h, w) = graph
        .input_spec()
        .ok_or_else(|| Error::Graph("node 0 must be the input".into()))?;
    let n = cfg.batch_size.max(1);
    let x = Tensor::from_fn([n, c, h, w], |i| ((i * 7919) % 256) as f32 / 255.0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::invalid("benchmark_latency", e.to_string()))?;
    let times = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..cfg.warmup_iters {
            graph::forward(graph, params, &x)?;
        }
        let mut times = Vec::with_capacity(cfg.timed_iters);
        for _ in 0..cfg.timed_iters {
            let t = Instant::now();
            let out = graph::forward(graph, params, &x)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
        Ok(times)
    })?;
    let stats = latency_stats(&times, n)?;
    log::info!(
        "{} timed iterations in {:.1} ms: median {:.3} ms/batch, p95 {:.3} ms, {:.3} ms/sample",
        stats.iterations,
        stats.total_ms,
        stats.median_batch_ms,
        stats.p95_batch_ms,
        stats.per_sample_ms
    );
    if stats.jitter > JITTER_LIMIT {
        log::warn!(
            "timing jitter p95/median = {:.2} exceeds {JITTER_LIMIT}; quiesce background work",
            stats.jitter
        );
    }
    Ok(stats)
}

/// How many times faster the subject is (`baseline / subject`).
pub fn speedup(baseline_ms: f64, subject_ms: f64) -> Result<f64> {
    ratio("speedup", baseline_ms, subject_ms)
}

/// How many times smaller the subject is (`baseline / subject`).
pub fn shrink_ratio(baseline: f64, subject: f64) -> Result<f64> {
    ratio("shrink_ratio", baseline, subject)
}

fn ratio(op: &'static str, baseline: f64, subject: f64) -> Result<f64> {
    if !(subject > 0.0) || !(baseline > 0.0) || !baseline.is_finite() {
        return Err(Error::invalid(
            op,
            format!("inputs must be positive, got {baseline} and {subject}"),
        ));
    }
    Ok(baseline / subject)
}

/// One decimal with a multiplication sign, e.g. `8.8×`.
pub fn format_ratio(r: f64) -> String {
    format!("{r:.1}×")
}

/// Rounded to the nearest integer with a tilde, e.g. `~33×`.
pub fn format_ratio_approx(r: f64) -> String {
    format!("~{}×", r.round())
}

/// Up to two decimals, trailing zeros dropped.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

fn format_accuracy(v: f64) -> String {
    let s = format_value(v);
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ratios {
    pub baseline: String,
    pub params: f64,
    pub flops: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub csv: String,
    /// The last row compared against every other row (empty for one row).
    pub ratios: Vec<Ratios>,
}

pub const COLUMNS: [&str; 5] = ["Model", "Acc(%)", "Param(M)", "FLOPs(M)", "Inf.Speed(ms)"];

/// Render rows as an aligned text table (best value per column in bold,
/// markdown style) and as CSV. With two or more rows the last row is the
/// subject and its size, cost and speed ratios against every other row are
/// listed below the table.
pub fn emit_table(rows: &[BenchRow]) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::invalid("emit_table", "no rows"));
    }
    for r in rows {
        r.validate()?;
    }

    let best = |f: fn(&BenchRow) -> f64, higher: bool| {
        let vals = rows.iter().map(f);
        if higher {
            vals.fold(f64::MIN, f64::max)
        } else {
            vals.fold(f64::MAX, f64::min)
        }
    };
    type Col = (fn(&BenchRow) -> f64, fn(f64) -> String, bool);
    let cols: [Col; 4] = [
        (|r| r.accuracy_pct, format_accuracy, true),
        (|r| r.params_m, format_value, false),
        (|r| r.flops_m, format_value, false),
        (|r| r.latency_ms, format_value, false),
    ];
    let bests: Vec<f64> = cols.iter().map(|&(f, _, hi)| best(f, hi)).collect();

    let mut cells: Vec<Vec<String>> = vec![COLUMNS.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let mut line = vec![r.model_name.clone()];
        for (&(f, fmt, _), &b) in cols.iter().zip(&bests) {
            let s = fmt(f(r));
            line.push(if f(r) == b { format!("**{s}**") } else { s });
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| cells.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, line) in cells.iter().enumerate() {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| {
                if c == 0 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        text.push_str(padded.join("  ").trim_end());
        text.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            text.push_str(&rule.join("  "));
            text.push('\n');
        }
    }

    let mut ratios = Vec::new();
    if let Some((subject, baselines)) = rows.split_last() {
        for b in baselines {
            ratios.push(Ratios {
                baseline: b.model_name.clone(),
                params: shrink_ratio(b.params_m, subject.params_m)?,
                flops: shrink_ratio(b.flops_m, subject.flops_m)?,
                speed: speedup(b.latency_ms, subject.latency_ms)?,
            });
        }
        if !ratios.is_empty() {
            text.push_str(&format!("\n{} relative to:\n", subject.model_name));
            let w = ratios.iter().map(|r| r.baseline.chars().count()).max().unwrap_or(0);
            for r in &ratios {
                text.push_str(&format!(
                    "  {:<w$}  {} fewer params, {} fewer FLOPs, {} faster\n",
                    r.baseline,
                    format_ratio(r.params),
                    format_ratio(r.flops),
                    format_ratio(r.speed),
                ));
            }
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        .expect("csv output is utf-8");
    Ok(Report { text, csv, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_sample_is_batch_time_over_batch() {
        let s = latency_stats(&[50.0, 50.0, 50.0], 10).unwrap();
        assert_eq!(s.per_sample_ms, 5.0);
        assert!(latency_stats(&[1.0, 2.0], 10).is_err());
    }

    #[test]
    fn median_ignores_one_outlier() {
        let mut t = vec![4.0; 100];
        let base = latency_stats(&t, 1).unwrap().median_batch_ms;
        t[17] = 1e6;
        assert_eq!(latency_stats(&t, 1).unwrap().median_batch_ms, base);
    }

    #[test]
    fn ratio_formatting() {
        assert_eq!(format_ratio_approx(shrink_ratio(25.6, 0.77).unwrap()), "~33×");
        assert_eq!(format_ratio_approx(shrink_ratio(8200.0, 93.0).unwrap()), "~88×");
        assert_eq!(format_ratio(speedup(88.0, 10.0).unwrap()), "8.8×");
        assert_eq!(format_ratio(speedup(56.0, 10.0).unwrap()), "5.6×");
        assert!(speedup(1.0, 0.0).is_err());
        assert!(shrink_ratio(1.0, -2.0).is_err());
    }

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(8200.0), "8200");
        assert_eq!(format_value(0.77), "0.77");
        assert_eq!(format_accuracy(98.0), "98.0");
        assert_eq!(format_value(93.976440), "93.98");
    }

    #[test]
    fn single_row_has_no_ratios() {
        let rows = &published_rows()[4..];
        let r = emit_table(rows).unwrap();
        assert!(r.ratios.is_empty());
        assert!(!r.text.contains('×'));
        assert!(emit_table(&[]).is_err());
    }
}
