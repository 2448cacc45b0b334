//! `moe-prefetch` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error (bad flags, missing
//! or malformed input files).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};

use moe_prefetch::engine::{
    aggregate, replay_all, write_layer_report, write_prompt_reports,
    DEFAULT_WARMUP_TOKENS,
};
use moe_prefetch::metrics::{activation_report, prediction_quality};
use moe_prefetch::trace_io::{oracle_predictions, write_predictions};
use moe_prefetch::{
    build_eamc, build_predictor, generate_synthetic, parse_predictions, parse_trace_csv, sweep,
    train, write_trace_csv, CacheConfig, Eamc, EamcConfig, EamcMode, Error, GeneratorConfig,
    LearnerConfig, LinearModel, ModelShape, PredictionTable, Predictor, PredictorKind,
    PredictorState, PromptTrace, ReplayConfig, Selection, StepKey,
};

const TRACE_SCHEMA: &str = "\
Trace CSV: header `prompt_id,token_index,layer_id,expert_ids,token_id,embedding`;
  expert_ids is a `|`-joined list of exactly --topk distinct IDs in [0, --experts);
  embedding is a `|`-joined list of decimals or empty. UTF-8, LF line endings.
  Every token of a prompt must have one row per layer, tokens numbered from 0.";

const PREDICTIONS_SCHEMA: &str = "\
Predictions JSONL: one object per line,
  {\"prompt_id\":0,\"token_index\":4,\"layer_id\":2,\"experts\":[3,17,22,41,50,63]}
  Experts are listed most important first. Missing steps mean no prefetch.";

const REPORT_SCHEMA: &str = "\
Outputs:
  --out            prompt_id,measured_accesses,cache_hits,cache_hit_rate,prediction_opportunities,
                   prediction_hits,prediction_hit_rate,queries,uncovered_queries
                   (one row per prompt, then an `all` row)
  --per-layer-out  layer_id,measured_accesses,cache_hits,cache_hit_rate,prediction_opportunities,
                   prediction_hits,prediction_hit_rate
Rates with an empty denominator are written as `n/a`.";

const SWEEP_SCHEMA: &str = "\
Outputs:
  --out            capacity_fraction,predictor,cache_hit_rate,prediction_hit_rate,measured_accesses
  --per-layer-out  capacity_fraction,predictor,layer_id,measured_accesses,cache_hits,cache_hit_rate,
                   prediction_hits,prediction_hit_rate";

const EVAL_SCHEMA: &str = "\
Score a predictions file against traces.

Outputs:
  --out            metric,value with rows positions, covered_positions, position_accuracy
                   (exact set match), per_label_accuracy, macro_f1 (experts absent from both
                   predictions and truth excluded), macro_f1_all_experts, prediction_hit_rate
  --per-layer-out  layer_id,positions,truth_experts,prediction_hits,agreement_rate";

const ACTIVATION_SCHEMA: &str = "\
Outputs:
  --out               layer_id,expert_id,count (aggregate over all prompts)
  --distinct-out      prompt_id,layer_id,distinct_experts
  --prompt-counts-out prompt_id,layer_id,expert_id,count (nonzero cells only)";

#[derive(Parser, Debug)]
#[command(
    name = "moe-prefetch",
    version,
    about = "Trace-driven simulator for MoE expert prefetching under a bounded expert cache",
    long_about = "Trace-driven simulator for MoE expert prefetching under a bounded expert cache.\n\n\
        Every subcommand also accepts `--config <path>`: a file of `key=value` lines, one per flag \
        (flag name without dashes; `true`/`false` for switches). Explicit flags override the file.",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate seeded synthetic traces.
    #[command(after_help = TRACE_SCHEMA)]
    GenTraces(GenTracesArgs),
    /// Build an EAMC (sketch collection) from training traces.
    #[command(after_help = "Output: JSON with the config echo, model shape and sketch arrays.")]
    BuildEamc(BuildEamcArgs),
    /// Train the linear multi-label predictor.
    #[command(
        after_help = "Output: JSON with shape, hyperparameters, per-epoch loss and weights \
        (one row per expert; features ordered layer one-hot, history, bias)."
    )]
    TrainPredictor(TrainArgs),
    /// Replay traces under one predictor and cache capacity.
    #[command(after_help = REPORT_SCHEMA)]
    Simulate(SimulateArgs),
    /// Replay traces at several cache capacities.
    #[command(after_help = SWEEP_SCHEMA)]
    Sweep(SweepArgs),
    /// Score a predictions file against traces.
    #[command(long_about = EVAL_SCHEMA, after_help = PREDICTIONS_SCHEMA)]
    EvalPredictions(EvalArgs),
    /// Per-layer and per-prompt expert activation counts.
    #[command(after_help = ACTIVATION_SCHEMA)]
    ReportActivations(ActivationArgs),
}

#[derive(Args, Debug, Clone)]
struct ShapeArgs {
    /// MoE layers per token.
    #[arg(long, default_value_t = 27)]
    layers: usize,
    /// Routed experts per layer.
    #[arg(long, default_value_t = 64)]
    experts: usize,
    /// Experts activated per token per layer.
    #[arg(long, default_value_t = 6)]
    topk: usize,
}

impl ShapeArgs {
    fn shape(&self) -> anyhow::Result<ModelShape> {
        Ok(ModelShape::new(self.layers, self.experts, self.topk)?)
    }
}

#[derive(Args, Debug)]
struct GenTracesArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    /// Number of prompts.
    #[arg(long, default_value_t = 100)]
    prompts: usize,
    /// Tokens per prompt.
    #[arg(long, default_value_t = 128)]
    tokens: usize,
    /// Hot-set size per (prompt, layer); at least --topk.
    #[arg(long, default_value_t = 8)]
    hot: usize,
    /// Probability that a token draws its experts from the hot set.
    #[arg(long, default_value_t = 0.9)]
    skew: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// ID of the first prompt; use disjoint ranges for train/test splits.
    #[arg(long, default_value_t = 0)]
    first_prompt_id: u64,
    /// Trace CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Also write ground-truth predictions (JSONL) for the generated traces.
    #[arg(long)]
    oracle_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Recent,
    Kmeans,
}

#[derive(Args, Debug)]
struct BuildEamcArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    /// Training trace CSV.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, value_enum, default_value = "kmeans")]
    mode: ModeArg,
    /// k for kmeans mode, sketch count for recent mode [default: 32 / 100].
    #[arg(long)]
    capacity: Option<usize>,
    /// Threshold counts to 0/1 before normalizing.
    #[arg(long, action = ArgAction::SetTrue)]
    binarize: bool,
    #[arg(long, default_value_t = moe_prefetch::eamc::DEFAULT_KMEANS_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    /// Training trace CSV.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// History decay in [0, 1).
    #[arg(long, default_value_t = 0.9)]
    decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SelectionArg {
    Topk,
    Threshold,
}

#[derive(Args, Debug)]
struct PredictorArgs {
    /// oracle, lru-only, next-layer-all, global-frequency, eam-cosine, external, learned-linear.
    #[arg(long)]
    predictor: String,
    /// EAMC JSON (eam-cosine).
    #[arg(long)]
    eamc: Option<PathBuf>,
    /// Training workload trace CSV (global-frequency).
    #[arg(long)]
    train_traces: Option<PathBuf>,
    /// Predictions JSONL (external).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Trained model JSON (learned-linear).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Selection rule for learned-linear.
    #[arg(long, value_enum, default_value = "topk")]
    selection: SelectionArg,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// Trace CSV to replay.
    #[arg(long)]
    traces: PathBuf,
    /// Experts prefetched per step (and asked of the predictor).
    #[arg(long, default_value_t = 6)]
    budget: usize,
    /// Tokens that only warm the cache and partial rEAM.
    #[arg(long, default_value_t = DEFAULT_WARMUP_TOKENS)]
    warmup: usize,
    /// Worker threads for prompt replay; output is identical for any value.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    #[command(flatten)]
    replay: ReplayArgs,
    #[command(flatten)]
    predictor: PredictorArgs,
    /// Cache capacity as a fraction of all experts.
    #[arg(long, conflicts_with = "capacity_entries")]
    capacity: Option<f64>,
    /// Cache capacity in entries.
    #[arg(long)]
    capacity_entries: Option<usize>,
    /// Per-prompt report CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_layer_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    #[command(flatten)]
    replay: ReplayArgs,
    #[command(flatten)]
    predictor: PredictorArgs,
    /// Comma-separated capacity fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.25,0.5,1.0")]
    capacities: Vec<f64>,
    /// Sweep CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_layer_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Leading tokens of each prompt to skip.
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_layer_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ActivationArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    distinct_out: Option<PathBuf>,
    #[arg(long)]
    prompt_counts_out: Option<PathBuf>,
}

/// Errors that are the caller's fault exit with status 2.
fn is_usage_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Parse { .. } | Error::Validation { .. } | Error::Config(_) | Error::Json(_) => true,
                Error::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
                _ => false,
            };
        }
        cause.downcast_ref::<UsageError>().is_some()
    })
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().map(|a| a.to_string_lossy().into_owned()).collect()) {
        Ok(args) => args,
        Err(err) => {
            eprintln!("error: {err:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_usage_error(&err) { 2 } else { 1 })
        }
    }
}

/// Splices `key=value` lines from `--config <path>` into the argument list
/// right after the subcommand, so flags given explicitly take precedence.
fn expand_config(args: Vec<String>) -> anyhow::Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let (path, consumed) = match args[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => (
            args.get(pos + 1)
                .cloned()
                .ok_or_else(|| usage("--config requires a path"))?,
            2,
        ),
    };
    let sub_name = args
        .iter()
        .skip(1)
        .find(|a| !a.starts_with('-'))
        .cloned()
        .ok_or_else(|| usage("--config must follow a subcommand"))?;
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(&sub_name)
        .ok_or_else(|| usage(format!("unknown subcommand `{sub_name}`")))?;

    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let mut injected = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{path}:{}: expected key=value", i + 1)))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| usage(format!("{path}:{}: unknown key `{key}`", i + 1)))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}"));
            injected.push(value.to_string());
        } else {
            match value {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                _ => return Err(usage(format!("{path}:{}: `{key}` expects true or false", i + 1))),
            }
        }
    }

    let mut out = args.clone();
    out.drain(pos..pos + consumed);
    let sub_pos = out.iter().position(|a| *a == sub_name).expect("subcommand present");
    out.splice(sub_pos + 1..sub_pos + 1, injected);
    Ok(out)
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let file = File::open(path)
        .map_err(Error::from)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(file))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

/// Writes to `path`, or stdout when no path is given.
fn emit(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> moe_prefetch::Result<()>) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w).with_context(|| format!("writing {}", p.display()))?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn load_traces(path: &Path, shape: &ModelShape) -> anyhow::Result<Vec<PromptTrace>> {
    parse_trace_csv(open(path)?, shape).with_context(|| format!("parsing {}", path.display()))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenTraces(a) => gen_traces(a),
        Command::BuildEamc(a) => build_eamc_cmd(a),
        Command::TrainPredictor(a) => train_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::EvalPredictions(a) => eval_predictions(a),
        Command::ReportActivations(a) => report_activations(a),
    }
}

fn gen_traces(a: GenTracesArgs) -> anyhow::Result<()> {
    let config = GeneratorConfig {
        num_prompts: a.prompts,
        tokens_per_prompt: a.tokens,
        shape: a.shape.shape()?,
        hot_set_size: a.hot,
        skew: a.skew,
        seed: a.seed,
        first_prompt_id: a.first_prompt_id,
    };
    let traces = generate_synthetic(&config)?;
    emit(Some(&a.out), |w| write_trace_csv(&traces, w))?;
    if let Some(path) = &a.oracle_out {
        let table = oracle_predictions(&traces);
        emit(Some(path), |w| write_predictions(&table, w))?;
    }
    Ok(())
}

fn build_eamc_cmd(a: BuildEamcArgs) -> anyhow::Result<()> {
    let shape = a.shape.shape()?;
    let traces = load_traces(&a.traces, &shape)?;
    let reams = traces
        .iter()
        .map(|t| t.ream(&shape))
        .collect::<moe_prefetch::Result<Vec<_>>>()?;
    let mode = match a.mode {
        ModeArg::Recent => EamcMode::Recent,
        ModeArg::Kmeans => EamcMode::Kmeans,
    };
    let capacity = a.capacity.unwrap_or(match mode {
        EamcMode::Recent => moe_prefetch::eamc::DEFAULT_RECENT_CAPACITY,
        EamcMode::Kmeans => moe_prefetch::eamc::DEFAULT_KMEANS_K,
    });
    let config = EamcConfig {
        mode,
        capacity,
        binarize: a.binarize,
        kmeans_max_iters: a.max_iters,
        seed: a.seed,
    };
    let eamc = build_eamc(&reams, &config)?;
    emit(Some(&a.out), |w| eamc.write_json(w))
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let shape = a.shape.shape()?;
    let traces = load_traces(&a.traces, &shape)?;
    let config = LearnerConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        decay: a.decay,
        seed: a.seed,
    };
    let model = train(&traces, &shape, &config)?;
    emit(Some(&a.out), |w| model.write_json(w))
}

fn load_predictor(
    args: &PredictorArgs,
    shape: &ModelShape,
    replay_traces: &[PromptTrace],
) -> anyhow::Result<Arc<dyn Predictor>> {
    let kind: PredictorKind = args.predictor.parse()?;
    let training;
    let mut state = PredictorState {
        replay_traces: Some(replay_traces),
        selection: match args.selection {
            SelectionArg::Topk => Selection::TopK,
            SelectionArg::Threshold => Selection::Threshold,
        },
        ..Default::default()
    };
    match kind {
        PredictorKind::GlobalFrequency => {
            let path = args
                .train_traces
                .as_ref()
                .ok_or_else(|| usage("global-frequency requires --train-traces"))?;
            training = load_traces(path, shape)?;
            state.training_traces = Some(&training);
        }
        PredictorKind::EamCosine => {
            let path = args.eamc.as_ref().ok_or_else(|| usage("eam-cosine requires --eamc"))?;
            let eamc = Eamc::read_json(open(path)?).with_context(|| format!("loading {}", path.display()))?;
            state.eamc = Some(Arc::new(eamc));
        }
        PredictorKind::External => {
            let path = args
                .predictions
                .as_ref()
                .ok_or_else(|| usage("external requires --predictions"))?;
            let table = parse_predictions(open(path)?, shape)
                .with_context(|| format!("parsing {}", path.display()))?;
            state.predictions = Some(Arc::new(table));
        }
        PredictorKind::LearnedLinear => {
            let path = args.model.as_ref().ok_or_else(|| usage("learned-linear requires --model"))?;
            let model = LinearModel::read_json(open(path)?)
                .with_context(|| format!("loading {}", path.display()))?;
            state.model = Some(Arc::new(model));
        }
        _ => {}
    }
    Ok(build_predictor(kind, shape, &state)?)
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let shape = a.shape.shape()?;
    let traces = load_traces(&a.replay.traces, &shape)?;
    let predictor = load_predictor(&a.predictor, &shape, &traces)?;
    let cache = match (a.capacity, a.capacity_entries) {
        (Some(f), None) => CacheConfig::fraction(f, a.replay.budget),
        (None, Some(n)) => CacheConfig::entries(n, a.replay.budget),
        _ => return Err(usage("give exactly one of --capacity or --capacity-entries")),
    };
    let config = ReplayConfig::new(shape, a.replay.warmup, cache);
    let reports = replay_all(&traces, predictor.as_ref(), &config, a.replay.jobs)?;
    let total = aggregate(shape.num_layers, reports.iter().map(|(_, r)| r));
    emit(a.out.as_deref(), |w| write_prompt_reports(&reports, &total, w))?;
    if let Some(p) = &a.per_layer_out {
        emit(Some(p), |w| write_layer_report(&total, w))?;
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> anyhow::Result<()> {
    let shape = a.shape.shape()?;
    let traces = load_traces(&a.replay.traces, &shape)?;
    let predictor = load_predictor(&a.predictor, &shape, &traces)?;
    let config = ReplayConfig::new(
        shape,
        a.replay.warmup,
        CacheConfig::fraction(1.0, a.replay.budget),
    );
    let report = sweep(&traces, predictor, &a.capacities, &config, a.replay.jobs)?;
    emit(a.out.as_deref(), |w| report.write_csv(w))?;
    if let Some(p) = &a.per_layer_out {
        emit(Some(p), |w| report.write_layer_csv(w))?;
    }
    Ok(())
}

fn eval_predictions(a: EvalArgs) -> anyhow::Result<()> {
    let shape = a.shape.shape()?;
    let traces = load_traces(&a.traces, &shape)?;
    let table: PredictionTable = parse_predictions(open(&a.predictions)?, &shape)
        .with_context(|| format!("parsing {}", a.predictions.display()))?;

    let mut preds: Vec<Vec<usize>> = Vec::new();
    let mut truths: Vec<Vec<usize>> = Vec::new();
    let mut layers: Vec<usize> = Vec::new();
    let mut covered = 0usize;
    for trace in &traces {
        for token in a.warmup..trace.num_tokens() {
            for layer in 0..shape.num_layers {
                let key = StepKey {
                    prompt_id: trace.prompt_id,
                    token_index: token,
                    layer_id: layer,
                };
                let p = table.get(&key).map(<[usize]>::to_vec);
                covered += usize::from(p.is_some());
                preds.push(p.unwrap_or_default());
                truths.push(trace.experts(token, layer).to_vec());
                layers.push(layer);
            }
        }
    }
    if truths.is_empty() {
        return Err(usage("no positions to evaluate after warm-up"));
    }
    let q = prediction_quality(&preds, &truths, shape.num_experts)?;

    let mut per_layer = vec![(0u64, 0u64, 0u64); shape.num_layers];
    for ((p, t), &l) in preds.iter().zip(&truths).zip(&layers) {
        per_layer[l].0 += 1;
        per_layer[l].1 += t.len() as u64;
        per_layer[l].2 += t.iter().filter(|e| p.contains(e)).count() as u64;
    }
    let truth_total: u64 = per_layer.iter().map(|x| x.1).sum();
    let hit_total: u64 = per_layer.iter().map(|x| x.2).sum();

    emit(a.out.as_deref(), |w| {
        writeln!(w, "metric,value")?;
        writeln!(w, "positions,{}", q.positions)?;
        writeln!(w, "covered_positions,{covered}")?;
        writeln!(w, "position_accuracy,{:.6}", q.position_accuracy)?;
        writeln!(w, "per_label_accuracy,{:.6}", q.per_label_accuracy)?;
        writeln!(w, "macro_f1,{:.6}", q.macro_f1)?;
        writeln!(w, "macro_f1_all_experts,{:.6}", q.macro_f1_all_experts)?;
        writeln!(w, "prediction_hit_rate,{:.6}", hit_total as f64 / truth_total as f64)?;
        Ok(())
    })?;
    if let Some(p) = &a.per_layer_out {
        emit(Some(p), |w| {
            writeln!(w, "layer_id,positions,truth_experts,prediction_hits,agreement_rate")?;
            for (l, (n, t, h)) in per_layer.iter().enumerate() {
                let rate = moe_prefetch::engine::fmt_rate((*t > 0).then(|| *h as f64 / *t as f64));
                writeln!(w, "{l},{n},{t},{h},{rate}")?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

fn report_activations(a: ActivationArgs) -> anyhow::Result<()> {
    let shape = a.shape.shape()?;
    let traces = load_traces(&a.traces, &shape)?;
    let report = activation_report(&traces, &shape)?;
    emit(a.out.as_deref(), |w| report.write_layer_counts(w))?;
    if let Some(p) = &a.distinct_out {
        emit(Some(p), |w| report.write_prompt_distinct(w))?;
    }
    if let Some(p) = &a.prompt_counts_out {
        emit(Some(p), |w| report.write_prompt_counts(w))?;
    }
    Ok(())
}
