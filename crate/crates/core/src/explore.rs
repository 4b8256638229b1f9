//! Constrained architecture search.
//!
//! Candidates are [`Design`] genomes. Each offspring is compiled, checked
//! against a [`ConstraintSet`] and only then trained on a short proxy
//! budget; survivors are ranked by [`universal_performance`].

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockSpec, Shape};
use crate::data::{self, Split};
use crate::error::{Error, Result};
use crate::graph::{ArchGraph, Column, Design, Downsample, Layer, Stage, Stem};
use crate::train::{self, TrainConfig};

/// Channel counts never grow beyond this under mutation.
pub const MAX_CHANNELS: usize = 512;
/// Layers per column never grow beyond this under mutation.
pub const MAX_LAYERS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintSet {
    pub max_flops: u64,
    pub forbid_pointwise_strided: bool,
    pub aads_only_downsampling: bool,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        ConstraintSet {
            max_flops: 100_000_000,
            forbid_pointwise_strided: true,
            aads_only_downsampling: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    MaxFlops,
    ForbidPointwiseStrided,
    AadsOnlyDownsampling,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    /// Offending node; `None` for whole-graph budgets.
    pub node: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(n) => write!(f, "{:?} at node {n}: {}", self.constraint, self.detail),
            None => write!(f, "{:?}: {}", self.constraint, self.detail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    pub flops: u64,
    pub violations: Vec<Violation>,
}

/// Check a graph against the constraint set. Every violation is listed,
/// by node id where one node is responsible.
pub fn indicator_feasible(graph: &ArchGraph, c: &ConstraintSet) -> Result<Feasibility> {
    if c.max_flops == 0 {
        return Err(Error::invalid("indicator_feasible", "max_flops must be positive"));
    }
    let shapes = graph.shapes()?;
    let flops = graph.flops()?;
    let mut violations = Vec::new();
    if flops > c.max_flops {
        violations.push(Violation {
            constraint: Constraint::MaxFlops,
            node: None,
            detail: format!("{flops} FLOPs exceeds {}", c.max_flops),
        });
    }
    for node in &graph.nodes {
        if c.forbid_pointwise_strided {
            if let BlockSpec::Conv1x1 { stride, .. } = node.block {
                if stride > 1 {
                    violations.push(Violation {
                        constraint: Constraint::ForbidPointwiseStrided,
                        node: Some(node.id),
                        detail: format!("1x1 conv with stride {stride}"),
                    });
                }
            }
        }
        if c.aads_only_downsampling && !matches!(node.block, BlockSpec::AadsDown { .. }) {
            let Shape::Map { h, w, .. } = shapes[node.id] else { continue };
            let reduces = node.inputs.iter().any(|&i| match shapes[i] {
                Shape::Map { h: hi, w: wi, .. } => h < hi || w < wi,
                Shape::Flat(_) => false,
            });
            if reduces {
                violations.push(Violation {
                    constraint: Constraint::AadsOnlyDownsampling,
                    node: Some(node.id),
                    detail: format!("{} reduces the spatial extent", node.block.name()),
                });
            }
        }
    }
    Ok(Feasibility {
        feasible: violations.is_empty(),
        flops,
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchObjective {
    pub kappa: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SearchObjective {
    fn default() -> Self {
        SearchObjective {
            kappa: 2.0,
            beta: 0.5,
            gamma: 0.5,
        }
    }
}

/// `20 log10(a^kappa / (p^beta m^gamma))` with parameters and FLOPs in
/// millions.
pub fn universal_performance(
    accuracy_pct: f64,
    params: f64,
    flops: f64,
    obj: &SearchObjective,
) -> Result<f64> {
    if !(accuracy_pct > 0.0 && accuracy_pct <= 100.0) {
        return Err(Error::invalid(
            "universal_performance",
            format!("accuracy must be in (0, 100], got {accuracy_pct}"),
        ));
    }
    if !(params > 0.0) || !(flops > 0.0) {
        return Err(Error::invalid(
            "universal_performance",
            "parameter and FLOP counts must be positive",
        ));
    }
    if !(obj.kappa > 0.0 && obj.beta > 0.0 && obj.gamma > 0.0) {
        return Err(Error::invalid("universal_performance", "exponents must be positive"));
    }
    let (p, m) = (params / 1e6, flops / 1e6);
    Ok(20.0
        * (obj.kappa * accuracy_pct.log10() - obj.beta * p.log10() - obj.gamma * m.log10()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    Widen,
    Narrow,
    AddVac,
    RemoveVac,
    MoveMerge,
    AddAads,
    RemoveAads,
    SwapKind,
}

impl Mutation {
    pub const ALL: [Mutation; 8] = [
        Mutation::Widen,
        Mutation::Narrow,
        Mutation::AddVac,
        Mutation::RemoveVac,
        Mutation::MoveMerge,
        Mutation::AddAads,
        Mutation::RemoveAads,
        Mutation::SwapKind,
    ];
}

fn round_channels(c: f64) -> usize {
    ((c / 4.0).round() as usize * 4).clamp(4, MAX_CHANNELS)
}

fn scale_stage(stage: &mut Stage, factor: f64) {
    stage.out_channels = round_channels(stage.out_channels as f64 * factor);
    for col in &mut stage.columns {
        for layer in &mut col.layers {
            match layer {
                Layer::Conv3x3 { out, .. } | Layer::Pointwise { out } => {
                    *out = round_channels(*out as f64 * factor)
                }
                Layer::Vac { embed, .. } => *embed = round_channels(*embed as f64 * factor),
                Layer::Depthwise => {}
            }
        }
    }
}

fn random_layer<R: Rng + ?Sized>(rng: &mut R, width: usize, not: Option<Layer>) -> Layer {
    loop {
        let layer = match rng.gen_range(0..4) {
            0 => Layer::Conv3x3 {
                out: width,
                groups: [1, 2, 4][rng.gen_range(0..3)],
            },
            1 => Layer::Depthwise,
            2 => Layer::Pointwise { out: width },
            _ => Layer::Vac {
                stride: [2, 4][rng.gen_range(0..2)],
                embed: [8, 16, 24][rng.gen_range(0..3)],
                groups: [2, 4][rng.gen_range(0..2)],
            },
        };
        let same = not.map_or(false, |n| std::mem::discriminant(&n) == std::mem::discriminant(&layer));
        if !same {
            return layer;
        }
    }
}

fn random_downsample<R: Rng + ?Sized>(rng: &mut R, width: usize) -> Downsample {
    match rng.gen_range(0..4) {
        0 => Downsample::Aads { out: None },
        1 => Downsample::MaxPool,
        2 => Downsample::StridedConv { out: width },
        _ => Downsample::StridedPointwise { out: width },
    }
}

/// Apply one mutation of the given kind. Returns false (leaving the design
/// untouched) when the kind has no site to act on.
pub fn apply_mutation<R: Rng + ?Sized>(d: &mut Design, kind: Mutation, rng: &mut R) -> bool {
    if d.stages.is_empty() {
        return false;
    }
    let ns = d.stages.len();
    match kind {
        Mutation::Widen | Mutation::Narrow => {
            let factor = if kind == Mutation::Widen { 1.25 } else { 0.8 };
            let s = rng.gen_range(0..ns);
            let before = d.stages[s].clone();
            scale_stage(&mut d.stages[s], factor);
            d.stages[s] != before
        }
        Mutation::AddVac => {
            let sites: Vec<(usize, usize)> = (0..ns)
                .flat_map(|s| (0..d.stages[s].columns.len()).map(move |c| (s, c)))
                .filter(|&(s, c)| d.stages[s].columns[c].layers.len() < MAX_LAYERS)
                .collect();
            let Some(&(s, c)) = sites.choose(rng) else { return false };
            let layers = &mut d.stages[s].columns[c].layers;
            let at = rng.gen_range(0..=layers.len());
            layers.insert(
                at,
                Layer::Vac {
                    stride: 2,
                    embed: [8, 16][rng.gen_range(0..2)],
                    groups: [2, 4][rng.gen_range(0..2)],
                },
            );
            true
        }
        Mutation::RemoveVac => {
            let sites: Vec<(usize, usize, usize)> = d
                .stages
                .iter()
                .enumerate()
                .flat_map(|(s, st)| {
                    st.columns.iter().enumerate().flat_map(move |(c, col)| {
                        col.layers
                            .iter()
                            .enumerate()
                            .filter(|(_, l)| matches!(l, Layer::Vac { .. }))
                            .map(move |(l, _)| (s, c, l))
                    })
                })
                .collect();
            let Some(&(s, c, l)) = sites.choose(rng) else { return false };
            d.stages[s].columns[c].layers.remove(l);
            true
        }
        Mutation::MoveMerge => {
            if ns < 2 {
                return false;
            }
            let s = rng.gen_range(0..ns - 1);
            d.stages[s].merge = !d.stages[s].merge;
            true
        }
        Mutation::AddAads => {
            let free: Vec<usize> = (0..ns).filter(|&s| d.stages[s].downsample.is_none()).collect();
            let Some(&s) = free.choose(rng) else { return false };
            d.stages[s].downsample = Some(Downsample::Aads { out: None });
            true
        }
        Mutation::RemoveAads => {
            let stem = d
                .stem
                .downsample
                .iter()
                .enumerate()
                .filter(|(_, x)| matches!(x, Downsample::Aads { .. }))
                .map(|(i, _)| (true, i));
            let stages = (0..ns)
                .filter(|&s| matches!(d.stages[s].downsample, Some(Downsample::Aads { .. })))
                .map(|s| (false, s));
            let sites: Vec<(bool, usize)> = stem.chain(stages).collect();
            let Some(&(in_stem, i)) = sites.choose(rng) else { return false };
            if in_stem {
                d.stem.downsample.remove(i);
            } else {
                d.stages[i].downsample = None;
            }
            true
        }
        Mutation::SwapKind => {
            if rng.gen_bool(0.25) {
                let s = rng.gen_range(0..ns);
                let width = d.stages[s].out_channels;
                let Some(site) = d.stages[s].downsample.as_mut() else { return false };
                let new = random_downsample(rng, width);
                let changed = std::mem::discriminant(site) != std::mem::discriminant(&new);
                *site = new;
                return changed;
            }
            let sites: Vec<(usize, usize, usize)> = d
                .stages
                .iter()
                .enumerate()
                .flat_map(|(s, st)| {
                    st.columns.iter().enumerate().flat_map(move |(c, col)| {
                        (0..col.layers.len()).map(move |l| (s, c, l))
                    })
                })
                .collect();
            let Some(&(s, c, l)) = sites.choose(rng) else { return false };
            let width = round_channels(d.stages[s].out_channels as f64 / 2.0);
            let old = d.stages[s].columns[c].layers[l];
            d.stages[s].columns[c].layers[l] = random_layer(rng, width, Some(old));
            true
        }
    }
}

/// A mutated copy of the design and the mutation applied. Every design
/// compiles to a valid graph, so the offspring is valid; feasibility is a
/// separate check.
pub fn mutate<R: Rng + ?Sized>(design: &Design, rng: &mut R) -> (Design, Mutation) {
    let mut d = design.clone();
    for _ in 0..32 {
        let kind = *Mutation::ALL.choose(rng).expect("non-empty");
        if apply_mutation(&mut d, kind, rng) {
            return (d, kind);
        }
    }
    scale_stage(&mut d.stages[0], 1.25);
    (d, Mutation::Widen)
}

/// A small residual design: a stem and one residual column per stage, every
/// stage ending in anti-aliased downsampling.
pub fn residual_prototype(name: &str, widths: &[usize]) -> Design {
    let stages = widths
        .iter()
        .map(|&w| Stage {
            columns: vec![Column {
                layers: vec![
                    Layer::Conv3x3 { out: w, groups: 2 },
                    Layer::Conv3x3 { out: w, groups: 2 },
                ],
                residual: true,
            }],
            merge: true,
            out_channels: w,
            downsample: Some(Downsample::Aads { out: None }),
        })
        .collect();
    Design {
        name: name.into(),
        input_channels: 1,
        input_size: data::IMAGE_SIDE,
        normalized: true,
        stem: Stem {
            channels: 8,
            downsample: vec![Downsample::Aads { out: None }, Downsample::Aads { out: None }],
        },
        stages,
    }
}

/// The reference design and two residual prototypes.
pub fn seed_designs() -> Vec<Design> {
    vec![
        crate::graph::reference_design(),
        residual_prototype("residual-small", &[16, 32, 64]),
        residual_prototype("residual-deep", &[16, 40, 80, 160]),
    ]
}

/// Short-budget training used to score candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyConfig {
    pub epochs: usize,
    /// Size of the synthetic set relative to the full 422 + 400 plates.
    pub data_fraction: f64,
    /// Training resolution (a divisor of the generated image side).
    pub side: usize,
    pub data_seed: u64,
    pub train_seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            epochs: 5,
            data_fraction: 0.25,
            side: 56,
            data_seed: 1,
            train_seed: 1,
        }
    }
}

/// Proxy accuracy evaluator: trains each design from scratch on one fixed
/// reduced dataset and reports test accuracy in percent.
pub struct ProxyEvaluator {
    cfg: ProxyConfig,
    data: data::SampleSet,
}

impl ProxyEvaluator {
    pub fn new(cfg: ProxyConfig) -> Result<Self> {
        if cfg.side == 0 || data::IMAGE_SIDE % cfg.side != 0 {
            return Err(Error::invalid(
                "proxy",
                format!("side {} does not divide {}", cfg.side, data::IMAGE_SIDE),
            ));
        }
        let n_def = (data::DEFAULT_DEFECTIVE as f64 * cfg.data_fraction).round() as usize;
        let n_clean = (data::DEFAULT_CLEAN as f64 * cfg.data_fraction).round() as usize;
        let set = data::generate(cfg.data_seed, n_def, n_clean);
        let set = data::split(&set, cfg.data_seed)?;
        let data = set.downscaled(data::IMAGE_SIDE / cfg.side)?;
        Ok(ProxyEvaluator { cfg, data })
    }

    pub fn accuracy(&self, design: &Design) -> Result<f64> {
        let graph = design.at_resolution(self.cfg.side).compile()?;
        let tc = TrainConfig {
            epochs: self.cfg.epochs,
            seed: self.cfg.train_seed,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let (_, history) = train::train(&graph, &self.data, &tc)?;
        let acc = history.last().and_then(|h| h.test_acc);
        match acc {
            Some(a) => Ok(a),
            None if self.data.indices(Split::Test).is_empty() => {
                Err(Error::invalid("proxy", "test split is empty"))
            }
            None => Err(Error::invalid("proxy", "no evaluation recorded")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub seed: u64,
    pub generations: usize,
    /// Survivors kept per generation.
    pub population: usize,
    /// Offspring drawn per generation.
    pub offspring: usize,
    /// Mutations applied per offspring are drawn from `1..=max_mutations`.
    pub max_mutations: usize,
    pub constraints: ConstraintSet,
    pub objective: SearchObjective,
    pub proxy: ProxyConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            seed: 0,
            generations: 5,
            population: 8,
            offspring: 8,
            max_mutations: 2,
            constraints: ConstraintSet::default(),
            objective: SearchObjective::default(),
            proxy: ProxyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub design: Design,
    pub fingerprint: String,
    pub params: u64,
    pub flops: u64,
    pub accuracy_pct: f64,
    pub score: f64,
}

/// One offspring (or seed) as seen by the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub index: usize,
    pub fingerprint: String,
    pub mutations: Vec<Mutation>,
    pub feasible: bool,
    pub violations: Vec<String>,
    pub params: u64,
    pub flops: u64,
    pub accuracy_pct: Option<f64>,
    pub score: Option<f64>,
    /// Entered the population after selection.
    pub admitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    pub seed: u64,
    pub entries: Vec<LogEntry>,
    pub stagnant: bool,
    pub best_fingerprint: String,
    pub best_score: f64,
    pub population: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    /// Per-generation RNG seeds.
    pub seeds: Vec<u64>,
    pub population: Vec<Candidate>,
    pub generation: usize,
    pub best_so_far: Candidate,
    pub log: Vec<GenerationLog>,
}

impl SearchState {
    /// The log as JSON lines, one generation per line.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for g in &self.log {
            out.push_str(&serde_json::to_string(g).expect("log serialization cannot fail"));
            out.push('\n');
        }
        out
    }

    /// Write `generations.jsonl` and `best.json` into `dir`.
    pub fn write_run(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("generations.jsonl"))?;
        f.write_all(self.log_jsonl().as_bytes())?;
        fs::write(
            dir.join("best.json"),
            serde_json::to_string_pretty(&self.best_so_far)?,
        )?;
        Ok(())
    }
}

fn generation_seed(seed: u64, generation: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (generation as u64).wrapping_add(1)
}

struct Scored {
    feasibility: Feasibility,
    graph: ArchGraph,
}

fn check(design: &Design, c: &ConstraintSet) -> Result<Scored> {
    let graph = design.compile()?;
    graph.validate()?;
    Ok(Scored {
        feasibility: indicator_feasible(&graph, c)?,
        graph,
    })
}

/// Search with the proxy-training evaluator.
pub fn search(seeds: &[Design], cfg: &SearchConfig) -> Result<SearchState> {
    let proxy = ProxyEvaluator::new(cfg.proxy)?;
    search_with(seeds, cfg, |d| proxy.accuracy(d))
}

/// Elitist (mu + lambda) search with a caller-supplied accuracy evaluator.
/// The evaluator is only ever called on feasible designs; evaluations within
/// a generation may run concurrently and are merged in offspring order.
pub fn search_with<F>(seeds: &[Design], cfg: &SearchConfig, evaluate: F) -> Result<SearchState>
where
    F: Fn(&Design) -> Result<f64> + Sync,
{
    if seeds.is_empty() || cfg.population == 0 {
        return Err(Error::invalid("search", "need seed designs and a population of at least 1"));
    }
    let score = |design: &Design, graph: &ArchGraph, flops: u64, acc: f64| -> Result<Candidate> {
        let params = graph.count_params();
        // accuracy floor keeps the objective defined for a degenerate proxy run
        let acc = acc.max(0.1);
        Ok(Candidate {
            design: design.clone(),
            fingerprint: graph.fingerprint(),
            params,
            flops,
            accuracy_pct: acc,
            score: universal_performance(acc, params as f64, flops as f64, &cfg.objective)?,
        })
    };

    let mut cache: HashMap<String, f64> = HashMap::new();
    let mut population: Vec<Candidate> = Vec::new();
    let mut entries = Vec::new();
    for (i, d) in seeds.iter().enumerate() {
        let s = check(d, &cfg.constraints)?;
        if !s.feasibility.feasible {
            let v: Vec<String> = s.feasibility.violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::invalid(
                "search",
                format!("seed design {} is infeasible: {}", d.name, v.join("; ")),
            ));
        }
        let acc = evaluate(d)?;
        let c = score(d, &s.graph, s.feasibility.flops, acc)?;
        cache.insert(c.fingerprint.clone(), acc);
        entries.push(LogEntry {
            index: i,
            fingerprint: c.fingerprint.clone(),
            mutations: vec![],
            feasible: true,
            violations: vec![],
            params: c.params,
            flops: c.flops,
            accuracy_pct: Some(c.accuracy_pct),
            score: Some(c.score),
            admitted: false,
        });
        if !population.iter().any(|p| p.fingerprint == c.fingerprint) {
            population.push(c);
        }
    }
    select(&mut population, cfg.population);
    mark_admitted(&mut entries, &population);
    let mut log = vec![generation_log(0, 0, entries, false, &population)];
    let mut state_seeds = vec![];

    for generation in 1..=cfg.generations {
        let gseed = generation_seed(cfg.seed, generation);
        state_seeds.push(gseed);
        let mut rng = ChaCha8Rng::seed_from_u64(gseed);
        let mut entries = Vec::with_capacity(cfg.offspring);
        let mut pending: Vec<(usize, Design, Scored, String)> = Vec::new();
        for index in 0..cfg.offspring {
            let parent = &population[rng.gen_range(0..population.len())].design;
            let mut child = parent.clone();
            let mut mutations = Vec::new();
            for _ in 0..rng.gen_range(1..=cfg.max_mutations.max(1)) {
                let (next, m) = mutate(&child, &mut rng);
                child = next;
                mutations.push(m);
            }
            child.name = format!("g{generation}-{index}");
            let s = check(&child, &cfg.constraints)?;
            let fingerprint = s.graph.fingerprint();
            entries.push(LogEntry {
                index,
                fingerprint: fingerprint.clone(),
                mutations,
                feasible: s.feasibility.feasible,
                violations: s.feasibility.violations.iter().map(|v| v.to_string()).collect(),
                params: s.graph.count_params(),
                flops: s.feasibility.flops,
                accuracy_pct: None,
                score: None,
                admitted: false,
            });
            if s.feasibility.feasible {
                pending.push((index, child, s, fingerprint));
            }
        }

        // evaluate distinct, unseen feasible offspring
        let mut todo: Vec<(&str, &Design)> = Vec::new();
        for (_, d, _, fp) in &pending {
            let fp = fp.as_str();
            if !cache.contains_key(fp) && !todo.iter().any(|(f, _)| *f == fp) {
                todo.push((fp, d));
            }
        }
        let results: Vec<Result<f64>> = todo.par_iter().map(|(_, d)| evaluate(d)).collect();
        let fresh: Vec<(String, f64)> = todo
            .iter()
            .zip(results)
            .map(|((fp, _), r)| r.map(|a| (fp.to_string(), a)))
            .collect::<Result<_>>()?;
        cache.extend(fresh);

        let mut offspring = Vec::new();
        for (index, d, s, fp) in pending {
            let acc = cache[&fp];
            let c = score(&d, &s.graph, s.feasibility.flops, acc)?;
            entries[index].accuracy_pct = Some(c.accuracy_pct);
            entries[index].score = Some(c.score);
            offspring.push(c);
        }
        let stagnant = offspring.is_empty();
        if stagnant {
            log::warn!("generation {generation}: no feasible offspring, elites carried forward");
        }
        for c in offspring {
            if !population.iter().any(|p| p.fingerprint == c.fingerprint) {
                population.push(c);
            }
        }
        select(&mut population, cfg.population);
        mark_admitted(&mut entries, &population);
        log::info!(
            "generation {generation}: best {:.3} ({}), {} feasible of {}",
            population[0].score,
            population[0].fingerprint,
            entries.iter().filter(|e| e.feasible).count(),
            entries.len()
        );
        log.push(generation_log(generation, gseed, entries, stagnant, &population));
    }

    Ok(SearchState {
        seeds: state_seeds,
        best_so_far: population[0].clone(),
        population,
        generation: cfg.generations,
        log,
    })
}

/// Keep the best `n` by score; the sort is stable so ties favour
/// incumbents.
fn select(population: &mut Vec<Candidate>, n: usize) {
    population.sort_by(|a, b| b.score.total_cmp(&a.score));
    population.truncate(n);
}

fn mark_admitted(entries: &mut [LogEntry], population: &[Candidate]) {
    for e in entries {
        e.admitted = e.feasible && population.iter().any(|p| p.fingerprint == e.fingerprint);
    }
}

fn generation_log(
    generation: usize,
    seed: u64,
    entries: Vec<LogEntry>,
    stagnant: bool,
    population: &[Candidate],
) -> GenerationLog {
    GenerationLog {
        generation,
        seed,
        entries,
        stagnant,
        best_fingerprint: population[0].fingerprint.clone(),
        best_score: population[0].score,
        population: population.iter().map(|c| c.fingerprint.clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_reference_config;

    #[test]
    fn reference_is_feasible() {
        let f = indicator_feasible(&build_reference_config(), &ConstraintSet::default()).unwrap();
        assert!(f.feasible, "{:?}", f.violations);
        assert!(f.violations.is_empty());
    }

    #[test]
    fn universal_performance_examples() {
        let obj = SearchObjective::default();
        let u = universal_performance(100.0, 1e6, 1e6, &obj).unwrap();
        assert!((u - 80.0).abs() < 1e-12);
        let lo = universal_performance(100.0, 1e6, 2e6, &obj).unwrap();
        assert!(lo < u);
        assert!(universal_performance(0.0, 1e6, 1e6, &obj).is_err());
        assert!(universal_performance(50.0, 0.0, 1e6, &obj).is_err());
        assert!(universal_performance(101.0, 1e6, 1e6, &obj).is_err());
    }

    #[test]
    fn seeds_are_feasible() {
        for d in seed_designs() {
            let g = d.compile().unwrap();
            g.validate().unwrap();
            let f = indicator_feasible(&g, &ConstraintSet::default()).unwrap();
            assert!(f.feasible, "{}: {:?}", d.name, f.violations);
        }
    }
}
