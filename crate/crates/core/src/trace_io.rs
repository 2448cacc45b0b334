//! Trace CSV and predictions JSONL formats, plus the seeded synthetic trace
//! generator.
//!
//! Trace CSV header: `prompt_id,token_index,layer_id,expert_ids,token_id,embedding`.
//! `expert_ids` and `embedding` are `|`-joined lists; `embedding` may be
//! empty. Canonical output is sorted by `(prompt_id, token_index, layer_id)`
//! with experts ascending and LF line endings.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Read, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_distinct_in_range, ModelShape, PromptTrace, TokenRecord};

pub const TRACE_HEADER: [&str; 6] = [
    "prompt_id",
    "token_index",
    "layer_id",
    "expert_ids",
    "token_id",
    "embedding",
];

/// Vocabulary size used for synthetic token IDs.
const SYNTHETIC_VOCAB: i64 = 102_400;

/// Reads a trace CSV and groups it into validated per-prompt traces,
/// ordered by prompt ID.
pub fn parse_trace_csv<R: Read>(reader: R, shape: &ModelShape) -> Result<Vec<PromptTrace>> {
    shape.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);

    let mut by_prompt: BTreeMap<u64, Vec<TokenRecord>> = BTreeMap::new();
    let mut first_line: HashMap<(u64, usize, usize), usize> = HashMap::new();
    let mut saw_header = false;

    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if !saw_header {
            let fields: Vec<&str> = row.iter().collect();
            if fields != TRACE_HEADER {
                return Err(Error::parse(
                    line,
                    format!("expected header `{}`", TRACE_HEADER.join(",")),
                ));
            }
            saw_header = true;
            continue;
        }
        if row.len() != TRACE_HEADER.len() {
            return Err(Error::parse(
                line,
                format!("expected {} columns, found {}", TRACE_HEADER.len(), row.len()),
            ));
        }
        let record = parse_row(&row, line, shape)?;
        let key = (record.prompt_id, record.token_index, record.layer_id);
        if let Some(prev) = first_line.insert(key, line) {
            return Err(Error::parse(
                line,
                format!(
                    "duplicate key (prompt {}, token {}, layer {}) first seen on line {prev}",
                    key.0, key.1, key.2
                ),
            ));
        }
        by_prompt.entry(record.prompt_id).or_default().push(record);
    }
    if !saw_header {
        return Err(Error::parse(1, "missing header"));
    }

    by_prompt
        .into_iter()
        .map(|(id, records)| PromptTrace::new(id, records, shape))
        .collect()
}

fn csv_error(err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line() as usize);
    Error::parse(line, err.to_string())
}

fn parse_row(row: &csv::StringRecord, line: usize, shape: &ModelShape) -> Result<TokenRecord> {
    fn int<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
        s.parse()
            .map_err(|_| Error::parse(line, format!("{name}: `{s}` is not a valid integer")))
    }
    let prompt_id: u64 = int(&row[0], "prompt_id", line)?;
    let token_index: usize = int(&row[1], "token_index", line)?;
    let layer_id: usize = int(&row[2], "layer_id", line)?;
    let experts = row[3]
        .split('|')
        .map(|s| int::<usize>(s, "expert_ids", line))
        .collect::<Result<Vec<_>>>()?;
    let token_id: i64 = int(&row[4], "token_id", line)?;
    let embedding = if row[5].is_empty() {
        Vec::new()
    } else {
        row[5]
            .split('|')
            .map(|s| {
                s.parse::<f32>()
                    .map_err(|_| Error::parse(line, format!("embedding: `{s}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?
    };

    let mut record = TokenRecord::new(prompt_id, token_index, layer_id, experts, token_id);
    record.embedding = embedding;
    record
        .validate(shape)
        .map_err(|e| Error::parse(line, e.to_string()))?;
    Ok(record)
}

/// Writes traces in canonical form.
pub fn write_trace_csv<W: Write>(traces: &[PromptTrace], mut out: W) -> Result<()> {
    writeln!(out, "{}", TRACE_HEADER.join(","))?;
    let mut ordered: Vec<&PromptTrace> = traces.iter().collect();
    ordered.sort_by_key(|t| t.prompt_id);
    let mut line = String::new();
    for trace in ordered {
        for r in trace.records() {
            line.clear();
            use std::fmt::Write as _;
            let _ = write!(line, "{},{},{},", r.prompt_id, r.token_index, r.layer_id);
            join_into(&mut line, &r.expert_ids);
            let _ = write!(line, ",{},", r.token_id);
            join_into(&mut line, &r.embedding);
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn join_into<T: std::fmt::Display>(buf: &mut String, items: &[T]) {
    use std::fmt::Write as _;
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            buf.push('|');
        }
        let _ = write!(buf, "{item}");
    }
}

pub fn trace_csv_string(traces: &[PromptTrace]) -> String {
    let mut buf = Vec::new();
    write_trace_csv(traces, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("trace CSV is ASCII")
}

/// Parameters of the synthetic skewed-activation generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_prompts: usize,
    pub tokens_per_prompt: usize,
    pub shape: ModelShape,
    /// Experts per (prompt, layer) hot set.
    pub hot_set_size: usize,
    /// Probability that a token's experts come from the hot set.
    pub skew: f64,
    pub seed: u64,
    /// ID of the first generated prompt. Prompts are derived from
    /// `(seed, prompt_id)`, so disjoint ID ranges give disjoint prompts.
    pub first_prompt_id: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_prompts: 100,
            tokens_per_prompt: 128,
            shape: ModelShape::default(),
            hot_set_size: 8,
            skew: 0.9,
            seed: 7,
            first_prompt_id: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.num_prompts == 0 || self.tokens_per_prompt == 0 {
            return Err(Error::config("num_prompts and tokens_per_prompt must be positive"));
        }
        if self.hot_set_size < self.shape.top_k || self.hot_set_size > self.shape.num_experts {
            return Err(Error::config(format!(
                "hot set size {} must be in [top_k={}, num_experts={}]",
                self.hot_set_size, self.shape.top_k, self.shape.num_experts
            )));
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(Error::config(format!("skew {} must be in [0, 1]", self.skew)));
        }
        Ok(())
    }
}

/// The per-prompt random stream: ChaCha8 keyed by the run seed, with the
/// prompt ID selecting the stream. Generation order therefore never affects
/// the content of a prompt.
pub fn prompt_rng(seed: u64, prompt_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(prompt_id);
    rng
}

/// Generates `num_prompts` traces. Each (prompt, layer) draws a hot set of
/// `hot_set_size` experts; each token-layer step draws `top_k` experts from
/// the hot set with probability `skew`, otherwise from all experts.
pub fn generate_synthetic(config: &GeneratorConfig) -> Result<Vec<PromptTrace>> {
    config.validate()?;
    (0..config.num_prompts as u64)
        .into_par_iter()
        .map(|i| generate_prompt(config, config.first_prompt_id + i))
        .collect()
}

fn generate_prompt(config: &GeneratorConfig, prompt_id: u64) -> Result<PromptTrace> {
    let shape = &config.shape;
    let mut rng = prompt_rng(config.seed, prompt_id);
    let hot_sets: Vec<Vec<usize>> = (0..shape.num_layers)
        .map(|_| sample(&mut rng, shape.num_experts, config.hot_set_size).into_vec())
        .collect();

    let mut records = Vec::with_capacity(config.tokens_per_prompt * shape.num_layers);
    for token in 0..config.tokens_per_prompt {
        let token_id = rng.gen_range(0..SYNTHETIC_VOCAB);
        for (layer, hot) in hot_sets.iter().enumerate() {
            let experts = if rng.gen_bool(config.skew) {
                sample(&mut rng, hot.len(), shape.top_k)
                    .into_iter()
                    .map(|i| hot[i])
                    .collect()
            } else {
                sample(&mut rng, shape.num_experts, shape.top_k).into_vec()
            };
            records.push(TokenRecord::new(prompt_id, token, layer, experts, token_id));
        }
    }
    PromptTrace::new(prompt_id, records, shape)
}

/// Identifies one (prompt, token, layer) routing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StepKey {
    pub prompt_id: u64,
    pub token_index: usize,
    pub layer_id: usize,
}

/// Externally supplied expert predictions keyed by routing step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionTable {
    entries: BTreeMap<StepKey, Vec<usize>>,
}

impl PredictionTable {
    pub fn get(&self, key: &StepKey) -> Option<&[usize]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn insert(&mut self, key: StepKey, experts: Vec<usize>) -> Option<Vec<usize>> {
        self.entries.insert(key, experts)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StepKey, &Vec<usize>)> {
        self.entries.iter()
    }
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    prompt_id: u64,
    token_index: usize,
    layer_id: usize,
    experts: Vec<usize>,
}

/// Parses a predictions JSONL stream. Blank lines are skipped; any other
/// malformed line is reported with its 1-based line number.
pub fn parse_predictions<R: BufRead>(reader: R, shape: &ModelShape) -> Result<PredictionTable> {
    let mut table = PredictionTable::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::parse(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine = serde_json::from_str(&line)
            .map_err(|e| Error::parse(line_no, format!("malformed prediction: {e}")))?;
        shape
            .check_layer(parsed.layer_id)
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        check_distinct_in_range(&parsed.experts, shape.num_experts)
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        let key = StepKey {
            prompt_id: parsed.prompt_id,
            token_index: parsed.token_index,
            layer_id: parsed.layer_id,
        };
        if table.insert(key, parsed.experts).is_some() {
            return Err(Error::parse(
                line_no,
                format!(
                    "duplicate prediction for prompt {} token {} layer {}",
                    key.prompt_id, key.token_index, key.layer_id
                ),
            ));
        }
    }
    Ok(table)
}

/// Writes one JSON object per entry, ordered by key.
pub fn write_predictions<W: Write>(table: &PredictionTable, mut out: W) -> Result<()> {
    for (key, experts) in table.iter() {
        let line = PredictionLine {
            prompt_id: key.prompt_id,
            token_index: key.token_index,
            layer_id: key.layer_id,
            experts: experts.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Ground-truth predictions for every step of `traces`.
pub fn oracle_predictions(traces: &[PromptTrace]) -> PredictionTable {
    let mut table = PredictionTable::default();
    for trace in traces {
        for r in trace.records() {
            table.insert(
                StepKey {
                    prompt_id: r.prompt_id,
                    token_index: r.token_index,
                    layer_id: r.layer_id,
                },
                r.expert_ids.clone(),
            );
        }
    }
    table
}
