//! Expert-prefetch predictors behind one interface.
//!
//! Every predictor answers "which experts of `target_layer` should be
//! prefetched now" from a [`PredictionContext`]. Rankings break ties by the
//! lower expert ID.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::eamc::{sketch, Eamc};
use crate::error::{Error, Result};
use crate::learner::LinearModel;
use crate::model::{Eam, ModelShape, PromptTrace};
use crate::trace_io::{oracle_predictions, PredictionTable, StepKey};

pub const DEFAULT_HISTORY_DECAY: f64 = 0.9;

/// Exponentially decayed per-(layer, expert) activation scores of the
/// current prompt. After a token's layer `l` is revealed, row `l` holds
/// `sum over past tokens t' activating e of decay^(age)`, where the most
/// recent token has age 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationHistory {
    decay: f64,
    num_experts: usize,
    values: Vec<f64>,
}

impl ActivationHistory {
    pub fn new(shape: &ModelShape, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config(format!("history decay {decay} must be in [0, 1)")));
        }
        Ok(Self {
            decay,
            num_experts: shape.num_experts,
            values: vec![0.0; shape.total_experts()],
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// Ages layer `layer_id` by one token and adds the new activations.
    pub fn record(&mut self, layer_id: usize, experts: &[usize]) {
        let row = &mut self.values[layer_id * self.num_experts..(layer_id + 1) * self.num_experts];
        for v in row.iter_mut() {
            *v *= self.decay;
        }
        for &e in experts {
            row[e] += 1.0;
        }
    }

    pub fn layer(&self, layer_id: usize) -> &[f64] {
        &self.values[layer_id * self.num_experts..(layer_id + 1) * self.num_experts]
    }
}

/// Everything a predictor may look at before `target_layer` executes.
#[derive(Debug, Clone, Copy)]
pub struct PredictionContext<'a> {
    pub prompt_id: u64,
    pub token_index: usize,
    pub target_layer: usize,
    /// Accumulated over every revealed step of the prompt so far.
    pub partial_ream: &'a Eam,
    pub history: &'a ActivationHistory,
    /// Maximum experts to predict.
    pub budget: usize,
}

impl PredictionContext<'_> {
    pub fn key(&self) -> StepKey {
        StepKey {
            prompt_id: self.prompt_id,
            token_index: self.token_index,
            layer_id: self.target_layer,
        }
    }
}

/// Predicted experts of one layer, most important first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionSet {
    experts: Vec<usize>,
}

impl PredictionSet {
    /// Keeps the first occurrence of each expert.
    pub fn new(experts: impl IntoIterator<Item = usize>) -> Self {
        let mut out: Vec<usize> = Vec::new();
        for e in experts {
            if !out.contains(&e) {
                out.push(e);
            }
        }
        Self { experts: out }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn experts(&self) -> &[usize] {
        &self.experts
    }

    pub fn contains(&self, expert: usize) -> bool {
        self.experts.contains(&expert)
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Expert IDs sorted ascending.
    pub fn sorted(&self) -> Vec<usize> {
        let mut v = self.experts.clone();
        v.sort_unstable();
        v
    }
}

impl AsRef<[usize]> for PredictionSet {
    fn as_ref(&self) -> &[usize] {
        &self.experts
    }
}

/// Indices of the `m` largest scores, descending, ties to the lower index.
/// With `positive_only`, zero and negative scores are never returned.
pub fn top_m<T: Copy + PartialOrd + Default>(scores: &[T], m: usize, positive_only: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len())
        .filter(|&i| !positive_only || scores[i] > T::default())
        .collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(m);
    idx
}

pub trait Predictor: Send + Sync {
    fn name(&self) -> &'static str;

    /// `Ok(None)` means the predictor has no answer for this step; the
    /// engine treats it as an empty prefetch and counts it as uncovered.
    fn predict(&self, ctx: &PredictionContext<'_>) -> Result<Option<PredictionSet>>;

    /// Decay the engine should use when building `ctx.history`.
    fn history_decay(&self) -> f64 {
        DEFAULT_HISTORY_DECAY
    }
}

/// Predicts exactly the ground truth of each step.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    truth: PredictionTable,
}

impl OraclePredictor {
    pub fn new(traces: &[PromptTrace]) -> Self {
        Self {
            truth: oracle_predictions(traces),
        }
    }
}

impl Predictor for OraclePredictor {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn predict(&self, ctx: &PredictionContext<'_>) -> Result<Option<PredictionSet>> {
        let truth = self.truth.get(&ctx.key()).ok_or_else(|| {
            Error::config(format!(
                "oracle has no ground truth for prompt {} token {} layer {}",
                ctx.prompt_id, ctx.token_index, ctx.target_layer
            ))
        })?;
        Ok(Some(PredictionSet::new(truth.iter().copied().take(ctx.budget))))
    }
}

/// No prefetching: the cache only serves previously used experts.
#[derive(Debug, Clone, Copy, Default)]
pub struct LruOnlyPredictor;

impl Predictor for LruOnlyPredictor {
    fn name(&self) -> &'static str {
        "lru_only"
    }

    fn predict(&self, _ctx: &PredictionContext<'_>) -> Result<Option<PredictionSet>> {
        Ok(Some(PredictionSet::empty()))
    }
}

/// Eagerly predicts every expert of the next layer, ignoring the budget.
#[derive(Debug, Clone, Copy)]
pub struct NextLayerAllPredictor {
    num_experts: usize,
}

impl NextLayerAllPredictor {
    pub fn new(shape: &ModelShape) -> Self {
        Self {
            num_experts: shape.num_experts,
        }
    }
}

impl Predictor for NextLayerAllPredictor {
    fn name(&self) -> &'static str {
        "next_layer_all"
    }

    fn predict(&self, _ctx: &PredictionContext<'_>) -> Result<Option<PredictionSet>> {
        Ok(Some(PredictionSet::new(0..self.num_experts)))
    }
}

/// Most frequently activated experts per layer over a training workload.
#[derive(Debug, Clone)]
pub struct GlobalFrequencyPredictor {
    shape: ModelShape,
    counts: Vec<u64>,
}

impl GlobalFrequencyPredictor {
    pub fn from_traces(traces: &[PromptTrace], shape: &ModelShape) -> Result<Self> {
        if traces.is_empty() {
            return Err(Error::config("global frequency needs a non-empty training workload"));
        }
        let mut counts = vec![0u64; shape.total_experts()];
        for t in traces {
            for r in t.records() {
                shape.check_layer(r.layer_id)?;
                for &e in &r.expert_ids {
                    shape.check_expert(e)?;
                    counts[r.layer_id * shape.num_experts + e] += 1;
                }
            }
        }
        Ok(Self {
            shape: *shape,
            counts,
        })
    }

    /// Row-major `L x E` counts.
    pub fn from_counts(shape: &ModelShape, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != shape.total_experts() {
            return Err(Error::Dimension {
                expected: shape.total_experts(),
                got: counts.len(),
            });
        }
        Ok(Self {
            shape: *shape,
            counts,
        })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn layer_counts(&self, layer_id: usize) -> &[u64] {
        let e = self.shape.num_experts;
        &self.counts[layer_id * e..(layer_id + 1) * e]
    }
}

impl Predictor for GlobalFrequencyPredictor {
    fn name(&self) -> &'static str {
        "global_frequency"
    }

    fn predict(&self, ctx: &PredictionContext<'_>) -> Result<Option<PredictionSet>> {
        self.shape.check_layer(ctx.target_layer)?;
        let row = self.layer_counts(ctx.target_layer);
        Ok(Some(PredictionSet::new(top_m(row, ctx.budget, true))))
    }
}

/// Matches the prompt's partial rEAM against an EAMC and predicts the
/// heaviest experts of the matched sketch's target-layer block.
#[derive(Debug, Clone)]
pub struct EamCosinePredictor {
    eamc: Arc<Eamc>,
    norms: Vec<f64>,
}

impl EamCosinePredictor {
    pub fn new(eamc: Arc<Eamc>) -> Result<Self> {
        if eamc.is_empty() {
            return Err(Error::NoSketches);
        }
        let norms = eamc
            .sketches()
            .iter()
            .map(|s| s.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(Self { eamc, norms })
    }

    pub fn eamc(&self) -> &Eamc {
        &self.eamc
    }

    /// Same result as `Eamc::match_nearest` on the sketch of `partial`,
    /// computed over the nonzero query entries only.
    pub fn match_partial(&self, partial: &Eam) -> Result<(usize, f64)> {
        let shape = &self.eamc.shape;
        if partial.shape() != shape {
            return Err(Error::Dimension {
                expected: shape.total_experts(),
                got: partial.shape().total_experts(),
            });
        }
        let query = sketch(partial, &self.eamc.config);
        let nonzero: Vec<(usize, f64)> = query
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .collect();
        let qnorm = nonzero.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        let sims: Vec<f64> = self
            .eamc
            .sketches()
            .iter()
            .zip(&self.norms)
            .map(|(s, &snorm)| {
                if qnorm == 0.0 || snorm == 0.0 {
                    0.0
                } else {
                    let s = s.as_slice();
                    let dot: f64 = nonzero.iter().map(|&(j, v)| v * s[j]).sum();
                    (dot / (qnorm * snorm)).clamp(-1.0, 1.0)
                }
            })
            .collect();
        Ok(crate::eamc::first_best(&sims))
    }
}

impl Predictor for EamCosinePredictor {
    fn name(&self) -> &'static str {
        "eam_cosine"
    }

    fn predict(&self, ctx: &PredictionContext<'_>) -> Result<Option<PredictionSet>> {
        let shape = &self.eamc.shape;
        shape.check_layer(ctx.target_layer)?;
        let (idx, _) = self.match_partial(ctx.partial_ream)?;
        let block = self.eamc.sketches()[idx].block(ctx.target_layer, shape.num_experts);
        Ok(Some(PredictionSet::new(top_m(block, ctx.budget, true))))
    }
}

/// Looks predictions up in an externally produced table.
#[derive(Debug, Clone)]
pub struct ExternalPredictor {
    table: Arc<PredictionTable>,
}

impl ExternalPredictor {
    pub fn new(table: Arc<PredictionTable>) -> Self {
        Self { table }
    }
}

impl Predictor for ExternalPredictor {
    fn name(&self) -> &'static str {
        "external"
    }

    fn predict(&self, ctx: &PredictionContext<'_>) -> Result<Option<PredictionSet>> {
        Ok(self
            .table
            .get(&ctx.key())
            .map(|experts| PredictionSet::new(experts.iter().copied().take(ctx.budget))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictorKind {
    Oracle,
    LruOnly,
    NextLayerAll,
    GlobalFrequency,
    EamCosine,
    External,
    LearnedLinear,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 7] = [
        PredictorKind::Oracle,
        PredictorKind::LruOnly,
        PredictorKind::NextLayerAll,
        PredictorKind::GlobalFrequency,
        PredictorKind::EamCosine,
        PredictorKind::External,
        PredictorKind::LearnedLinear,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PredictorKind::Oracle => "oracle",
            PredictorKind::LruOnly => "lru-only",
            PredictorKind::NextLayerAll => "next-layer-all",
            PredictorKind::GlobalFrequency => "global-frequency",
            PredictorKind::EamCosine => "eam-cosine",
            PredictorKind::External => "external",
            PredictorKind::LearnedLinear => "learned-linear",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.replace('_', "-");
        PredictorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == normalized)
            .ok_or_else(|| Error::config(format!("unknown predictor `{s}`")))
    }
}

/// State a predictor kind may need. Only the pieces relevant to the chosen
/// kind have to be present.
#[derive(Debug, Clone, Default)]
pub struct PredictorState<'a> {
    /// Traces being replayed (oracle).
    pub replay_traces: Option<&'a [PromptTrace]>,
    /// Training workload (global frequency).
    pub training_traces: Option<&'a [PromptTrace]>,
    pub eamc: Option<Arc<Eamc>>,
    pub predictions: Option<Arc<PredictionTable>>,
    pub model: Option<Arc<LinearModel>>,
    /// Output rule for the learned predictor.
    pub selection: crate::learner::Selection,
}

/// Instantiates a predictor of `kind`, failing with a configuration error
/// when its state is missing.
pub fn build_predictor(
    kind: PredictorKind,
    shape: &ModelShape,
    state: &PredictorState<'_>,
) -> Result<Arc<dyn Predictor>> {
    let missing = |what: &str| Error::config(format!("predictor `{kind}` requires {what}"));
    Ok(match kind {
        PredictorKind::Oracle => Arc::new(OraclePredictor::new(
            state.replay_traces.ok_or_else(|| missing("the replayed traces"))?,
        )),
        PredictorKind::LruOnly => Arc::new(LruOnlyPredictor),
        PredictorKind::NextLayerAll => Arc::new(NextLayerAllPredictor::new(shape)),
        PredictorKind::GlobalFrequency => Arc::new(GlobalFrequencyPredictor::from_traces(
            state.training_traces.ok_or_else(|| missing("training traces"))?,
            shape,
        )?),
        PredictorKind::EamCosine => {
            let eamc = state.eamc.clone().ok_or_else(|| missing("an EAMC"))?;
            if eamc.shape != *shape {
                return Err(Error::config("EAMC shape does not match the model shape"));
            }
            Arc::new(EamCosinePredictor::new(eamc)?)
        }
        PredictorKind::External => Arc::new(ExternalPredictor::new(
            state.predictions.clone().ok_or_else(|| missing("a predictions table"))?,
        )),
        PredictorKind::LearnedLinear => {
            let model = state.model.clone().ok_or_else(|| missing("a trained model"))?;
            if !model.is_trained() {
                return Err(Error::Untrained);
            }
            if model.shape() != shape {
                return Err(Error::config("model shape does not match the model shape of the traces"));
            }
            Arc::new(crate::learner::LearnedLinearPredictor::new(model).with_selection(state.selection))
        }
    })
}
