//! Token-by-token, layer-by-layer trace replay under a predictor and an
//! LRU expert cache, plus capacity sweeps.
//!
//! Warm-up tokens touch their ground-truth experts into the cache and feed
//! the partial rEAM and history without being counted. For every later
//! (token, layer) step the engine queries the predictor for that layer,
//! prefetches the predicted set, then reveals the true experts. Each true
//! expert counts once towards prediction hits (it was predicted) and once
//! towards cache hits (it was resident when touched).

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{Access, CacheConfig, ExpertCache};
use crate::error::{Error, Result};
use crate::model::{Eam, ModelShape, PromptTrace};
use crate::predictors::{ActivationHistory, PredictionContext, PredictionSet, Predictor};
use crate::trace_io::StepKey;

pub const DEFAULT_WARMUP_TOKENS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub shape: ModelShape,
    pub warmup_tokens: usize,
    /// Cache capacity and prefetch budget; the budget is also the number of
    /// experts the predictor is asked for.
    pub cache: CacheConfig,
}

impl ReplayConfig {
    pub fn new(shape: ModelShape, warmup_tokens: usize, cache: CacheConfig) -> Self {
        Self {
            shape,
            warmup_tokens,
            cache,
        }
    }
}

/// Hit counters over measured (post-warm-up) steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub measured_accesses: u64,
    pub cache_hits: u64,
    pub prediction_opportunities: u64,
    pub prediction_hits: u64,
}

impl Counters {
    pub fn add(&mut self, other: &Counters) {
        self.measured_accesses += other.measured_accesses;
        self.cache_hits += other.cache_hits;
        self.prediction_opportunities += other.prediction_opportunities;
        self.prediction_hits += other.prediction_hits;
    }

    /// `None` when nothing was measured.
    pub fn cache_hit_rate(&self) -> Option<f64> {
        ratio(self.cache_hits, self.measured_accesses)
    }

    pub fn prediction_hit_rate(&self) -> Option<f64> {
        ratio(self.prediction_hits, self.prediction_opportunities)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Formats an optional rate; 0/0 is reported as `n/a`.
pub fn fmt_rate(rate: Option<f64>) -> String {
    match rate {
        Some(r) => format!("{r:.6}"),
        None => "n/a".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    pub prompts: u64,
    pub totals: Counters,
    pub per_layer: Vec<Counters>,
    /// Predictor queries issued during measured steps.
    pub queries: u64,
    /// Queries for which the predictor had no answer.
    pub uncovered_queries: u64,
}

impl SimReport {
    pub fn empty(num_layers: usize) -> Self {
        Self {
            prompts: 0,
            totals: Counters::default(),
            per_layer: vec![Counters::default(); num_layers],
            queries: 0,
            uncovered_queries: 0,
        }
    }

    pub fn merge(&mut self, other: &SimReport) {
        self.prompts += other.prompts;
        self.totals.add(&other.totals);
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            a.add(b);
        }
        self.queries += other.queries;
        self.uncovered_queries += other.uncovered_queries;
    }

    pub fn cache_hit_rate(&self) -> Option<f64> {
        self.totals.cache_hit_rate()
    }

    pub fn prediction_hit_rate(&self) -> Option<f64> {
        self.totals.prediction_hit_rate()
    }
}

/// One measured step's prediction and ground truth, both sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPrediction {
    pub key: StepKey,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

/// Replays one prompt.
pub fn replay_prompt(
    trace: &PromptTrace,
    predictor: &dyn Predictor,
    config: &ReplayConfig,
) -> Result<SimReport> {
    replay(trace, predictor, config, None)
}

/// Replays one prompt and also returns every measured step's prediction.
pub fn replay_prompt_logged(
    trace: &PromptTrace,
    predictor: &dyn Predictor,
    config: &ReplayConfig,
) -> Result<(SimReport, Vec<StepPrediction>)> {
    let mut log = Vec::new();
    let report = replay(trace, predictor, config, Some(&mut log))?;
    Ok((report, log))
}

fn replay(
    trace: &PromptTrace,
    predictor: &dyn Predictor,
    config: &ReplayConfig,
    mut log: Option<&mut Vec<StepPrediction>>,
) -> Result<SimReport> {
    let shape = config.shape;
    if trace.num_layers() != shape.num_layers {
        return Err(Error::Validation {
            prompt_id: trace.prompt_id,
            message: format!(
                "trace has {} layers but the replay shape has {}",
                trace.num_layers(),
                shape.num_layers
            ),
        });
    }
    let mut cache = ExpertCache::new(shape, &config.cache)?;
    let mut partial = Eam::zeros(shape);
    let mut history = ActivationHistory::new(&shape, predictor.history_decay())?;
    let mut report = SimReport::empty(shape.num_layers);
    report.prompts = 1;
    let mut keys = Vec::with_capacity(shape.num_experts);

    for token in 0..trace.num_tokens() {
        let measured = token >= config.warmup_tokens;
        for layer in 0..shape.num_layers {
            let truth = trace.experts(token, layer);
            if measured {
                let ctx = PredictionContext {
                    prompt_id: trace.prompt_id,
                    token_index: token,
                    target_layer: layer,
                    partial_ream: &partial,
                    history: &history,
                    budget: config.cache.prefetch_budget,
                };
                let predicted = predictor.predict(&ctx)?;
                report.queries += 1;
                if predicted.is_none() {
                    report.uncovered_queries += 1;
                }
                let predicted = predicted.unwrap_or_else(PredictionSet::empty);
                keys.clear();
                keys.extend(predicted.experts().iter().map(|&e| (layer, e)));
                cache.prefetch(&keys)?;

                let mut step = Counters::default();
                for &e in truth {
                    step.prediction_opportunities += 1;
                    step.prediction_hits += u64::from(predicted.contains(e));
                    step.measured_accesses += 1;
                    step.cache_hits += u64::from(cache.touch((layer, e))? == Access::Hit);
                }
                report.totals.add(&step);
                report.per_layer[layer].add(&step);
                if let Some(log) = log.as_deref_mut() {
                    log.push(StepPrediction {
                        key: ctx.key(),
                        predicted: predicted.sorted(),
                        truth: truth.to_vec(),
                    });
                }
            } else {
                for &e in truth {
                    cache.touch((layer, e))?;
                }
            }
            cache.end_step();
            partial.accumulate(layer, truth)?;
            history.record(layer, truth);
        }
    }
    Ok(report)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

/// Replays every prompt on `jobs` workers. Results are in input order and
/// identical for any worker count.
pub fn replay_all(
    traces: &[PromptTrace],
    predictor: &dyn Predictor,
    config: &ReplayConfig,
    jobs: usize,
) -> Result<Vec<(u64, SimReport)>> {
    pool(jobs)?.install(|| {
        traces
            .par_iter()
            .map(|t| replay_prompt(t, predictor, config).map(|r| (t.prompt_id, r)))
            .collect()
    })
}

/// Measured-step predictions of every prompt, in input order.
pub fn collect_predictions(
    traces: &[PromptTrace],
    predictor: &dyn Predictor,
    config: &ReplayConfig,
    jobs: usize,
) -> Result<Vec<StepPrediction>> {
    let per_prompt: Vec<Vec<StepPrediction>> = pool(jobs)?.install(|| {
        traces
            .par_iter()
            .map(|t| replay_prompt_logged(t, predictor, config).map(|(_, log)| log))
            .collect::<Result<_>>()
    })?;
    Ok(per_prompt.into_iter().flatten().collect())
}

pub fn aggregate<'a>(num_layers: usize, reports: impl IntoIterator<Item = &'a SimReport>) -> SimReport {
    let mut total = SimReport::empty(num_layers);
    for r in reports {
        total.merge(r);
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub capacity_fraction: f64,
    pub capacity_entries: usize,
    pub report: SimReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub predictor: String,
    pub points: Vec<SweepPoint>,
}

/// Aggregate replay of all traces at each capacity fraction.
pub fn sweep(
    traces: &[PromptTrace],
    predictor: Arc<dyn Predictor>,
    capacities: &[f64],
    config: &ReplayConfig,
    jobs: usize,
) -> Result<SweepReport> {
    if traces.is_empty() {
        return Err(Error::config("sweep needs at least one trace"));
    }
    if capacities.is_empty() {
        return Err(Error::config("sweep needs at least one capacity"));
    }
    let mut points = Vec::with_capacity(capacities.len());
    for &fraction in capacities {
        let mut point_config = *config;
        point_config.cache = CacheConfig::fraction(fraction, config.cache.prefetch_budget);
        let entries = point_config.cache.resolve(&config.shape)?;
        let per_prompt = replay_all(traces, predictor.as_ref(), &point_config, jobs)?;
        let report = aggregate(config.shape.num_layers, per_prompt.iter().map(|(_, r)| r));
        points.push(SweepPoint {
            capacity_fraction: fraction,
            capacity_entries: entries,
            report,
        });
    }
    Ok(SweepReport {
        predictor: predictor.name().to_string(),
        points,
    })
}

pub const SWEEP_HEADER: &str = "capacity_fraction,predictor,cache_hit_rate,prediction_hit_rate,measured_accesses";
pub const SWEEP_LAYER_HEADER: &str = "capacity_fraction,predictor,layer_id,measured_accesses,cache_hits,cache_hit_rate,prediction_hits,prediction_hit_rate";

impl SweepReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{SWEEP_HEADER}")?;
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{}",
                p.capacity_fraction,
                self.predictor,
                fmt_rate(p.report.cache_hit_rate()),
                fmt_rate(p.report.prediction_hit_rate()),
                p.report.totals.measured_accesses
            )?;
        }
        Ok(())
    }

    pub fn write_layer_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{SWEEP_LAYER_HEADER}")?;
        for p in &self.points {
            for (layer, c) in p.report.per_layer.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{layer},{},{},{},{},{}",
                    p.capacity_fraction,
                    self.predictor,
                    c.measured_accesses,
                    c.cache_hits,
                    fmt_rate(c.cache_hit_rate()),
                    c.prediction_hits,
                    fmt_rate(c.prediction_hit_rate())
                )?;
            }
        }
        Ok(())
    }
}

pub const PROMPT_REPORT_HEADER: &str = "prompt_id,measured_accesses,cache_hits,cache_hit_rate,prediction_opportunities,prediction_hits,prediction_hit_rate,queries,uncovered_queries";
pub const LAYER_REPORT_HEADER: &str = "layer_id,measured_accesses,cache_hits,cache_hit_rate,prediction_opportunities,prediction_hits,prediction_hit_rate";

/// Per-prompt rows followed by an `all` row with the aggregate.
pub fn write_prompt_reports<W: Write>(
    reports: &[(u64, SimReport)],
    total: &SimReport,
    mut out: W,
) -> Result<()> {
    writeln!(out, "{PROMPT_REPORT_HEADER}")?;
    let row = |id: &str, r: &SimReport| {
        let c = &r.totals;
        format!(
            "{id},{},{},{},{},{},{},{},{}",
            c.measured_accesses,
            c.cache_hits,
            fmt_rate(c.cache_hit_rate()),
            c.prediction_opportunities,
            c.prediction_hits,
            fmt_rate(c.prediction_hit_rate()),
            r.queries,
            r.uncovered_queries
        )
    };
    for (id, r) in reports {
        writeln!(out, "{}", row(&id.to_string(), r))?;
    }
    writeln!(out, "{}", row("all", total))?;
    Ok(())
}

pub fn write_layer_report<W: Write>(report: &SimReport, mut out: W) -> Result<()> {
    writeln!(out, "{LAYER_REPORT_HEADER}")?;
    for (layer, c) in report.per_layer.iter().enumerate() {
        writeln!(
            out,
            "{layer},{},{},{},{},{},{}",
            c.measured_accesses,
            c.cache_hits,
            fmt_rate(c.cache_hit_rate()),
            c.prediction_opportunities,
            c.prediction_hits,
            fmt_rate(c.prediction_hit_rate())
        )?;
    }
    Ok(())
}
