//! Per-layer multi-label linear predictor trained with sigmoid outputs and
//! binary cross-entropy.
//!
//! Feature layout (length `L + E + 1`): one-hot target layer, decayed
//! activation history of the target layer, constant bias 1.0. The weight
//! matrix is `E x (L + E + 1)`, one row per expert output, stored row-major.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelShape, PromptTrace};
use crate::predictors::{
    top_m, ActivationHistory, PredictionContext, PredictionSet, Predictor, DEFAULT_HISTORY_DECAY,
};

const INIT_SCALE: f64 = 0.01;
const EARLY_STOP_MIN_DELTA: f64 = 1e-5;
const EARLY_STOP_PATIENCE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// History decay applied to features.
    pub decay: f64,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 10,
            decay: DEFAULT_HISTORY_DECAY,
            seed: 0,
        }
    }
}

/// How expert scores are turned into a prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// The `k` highest logits.
    #[default]
    TopK,
    /// Experts whose sigmoid probability exceeds 0.5, at most `k`.
    Threshold,
}

/// Dense feature vector: `[layer one-hot | history | bias]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn feature_len(shape: &ModelShape) -> usize {
    shape.num_layers + shape.num_experts + 1
}

fn features_for(shape: &ModelShape, layer: usize, history: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; feature_len(shape)];
    x[layer] = 1.0;
    x[shape.num_layers..shape.num_layers + shape.num_experts].copy_from_slice(history);
    x[shape.num_layers + shape.num_experts] = 1.0;
    x
}

/// Builds the feature vector of a prediction query.
pub fn featurize(ctx: &PredictionContext<'_>, shape: &ModelShape) -> Result<FeatureVector> {
    shape.check_layer(ctx.target_layer)?;
    Ok(FeatureVector(features_for(
        shape,
        ctx.target_layer,
        ctx.history.layer(ctx.target_layer),
    )))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of logit `z` against label `y`, numerically stable.
fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    shape: ModelShape,
    config: LearnerConfig,
    trained: bool,
    /// One row of `L + E + 1` weights per expert.
    weights: Vec<Vec<f64>>,
    /// Mean BCE of each completed epoch.
    loss_history: Vec<f64>,
}

/// Training pairs stored sparsely: feature indices/values plus labels.
struct Dataset {
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f32>,
    labels: Vec<u16>,
    top_k: usize,
}

impl Dataset {
    fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    fn example(&self, i: usize) -> (&[u32], &[f32], &[u16]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (
            &self.indices[a..b],
            &self.values[a..b],
            &self.labels[i * self.top_k..(i + 1) * self.top_k],
        )
    }
}

fn build_dataset(traces: &[PromptTrace], shape: &ModelShape, decay: f64) -> Result<Dataset> {
    if shape.num_experts > usize::from(u16::MAX) {
        return Err(Error::config("too many experts for the training encoder"));
    }
    let mut ds = Dataset {
        offsets: vec![0],
        indices: Vec::new(),
        values: Vec::new(),
        labels: Vec::new(),
        top_k: shape.top_k,
    };
    let (l, e) = (shape.num_layers, shape.num_experts);
    for trace in traces {
        if trace.num_layers() != l {
            return Err(Error::config(format!(
                "prompt {} has {} layers, model expects {l}",
                trace.prompt_id,
                trace.num_layers()
            )));
        }
        let mut history = ActivationHistory::new(shape, decay)?;
        for token in 0..trace.num_tokens() {
            for layer in 0..l {
                ds.indices.push(layer as u32);
                ds.values.push(1.0);
                for (j, &h) in history.layer(layer).iter().enumerate() {
                    if h != 0.0 {
                        ds.indices.push((l + j) as u32);
                        ds.values.push(h as f32);
                    }
                }
                ds.indices.push((l + e) as u32);
                ds.values.push(1.0);
                ds.offsets.push(ds.indices.len());

                let truth = trace.experts(token, layer);
                ds.labels.extend(truth.iter().map(|&x| x as u16));
                history.record(layer, truth);
            }
        }
    }
    Ok(ds)
}

impl LinearModel {
    /// Seeded initialization, not yet trained.
    pub fn new(shape: ModelShape, config: LearnerConfig) -> Result<Self> {
        shape.validate()?;
        if !(0.0..1.0).contains(&config.decay) {
            return Err(Error::config(format!("decay {} must be in [0, 1)", config.decay)));
        }
        if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = feature_len(&shape);
        let weights = (0..shape.num_experts)
            .map(|_| (0..d).map(|_| rng.gen_range(-INIT_SCALE..INIT_SCALE)).collect())
            .collect();
        Ok(Self {
            shape,
            config,
            trained: false,
            weights,
            loss_history: Vec::new(),
        })
    }

    /// Builds a model with explicit weights (`E` rows of `L + E + 1`).
    pub fn from_weights(shape: ModelShape, config: LearnerConfig, weights: Vec<Vec<f64>>) -> Result<Self> {
        let mut model = Self::new(shape, config)?;
        model.weights = weights;
        model.trained = true;
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let d = feature_len(&self.shape);
        if self.weights.len() != self.shape.num_experts {
            return Err(Error::Dimension {
                expected: self.shape.num_experts,
                got: self.weights.len(),
            });
        }
        for row in &self.weights {
            if row.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: row.len(),
                });
            }
            if row.iter().any(|w| !w.is_finite()) {
                return Err(Error::config("model weights must be finite"));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        let d = feature_len(&self.shape);
        if features.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: features.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .map(|row| row.iter().zip(features).map(|(w, x)| w * x).sum())
            .collect())
    }

    /// Mean BCE over the `E` outputs for one example, and its gradient with
    /// respect to the weights (same layout as [`LinearModel::weights`]).
    pub fn loss_and_gradient(&self, features: &[f64], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let z = self.logits(features)?;
        let e = self.shape.num_experts as f64;
        let mut y = vec![0.0; self.shape.num_experts];
        for &l in labels {
            self.shape.check_expert(l)?;
            y[l] = 1.0;
        }
        let loss = z.iter().zip(&y).map(|(&z, &y)| bce(z, y)).sum::<f64>() / e;
        let grad = z
            .iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let g = (sigmoid(z) - y) / e;
                features.iter().map(|x| g * x).collect()
            })
            .collect();
        Ok((loss, grad))
    }

    /// Loss only; used by finite-difference checks.
    pub fn loss(&self, features: &[f64], labels: &[usize]) -> Result<f64> {
        Ok(self.loss_and_gradient(features, labels)?.0)
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    /// Experts selected for `features`, best first.
    pub fn predict_topk(&self, features: &[f64], k: usize, selection: Selection) -> Result<PredictionSet> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let z = self.logits(features)?;
        Ok(select(&z, k, selection))
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let model: LinearModel = serde_json::from_reader(reader)?;
        model.validate()?;
        Ok(model)
    }

    pub fn write_json<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer(&mut writer, self)?;
        writer.write_all(b"\n")?;
        Ok(())
    }
}

/// Selects experts from logits; sigmoid is monotone so ranking by logit is
/// ranking by probability, and `p > 0.5` is `z > 0`.
pub fn select(logits: &[f64], k: usize, selection: Selection) -> PredictionSet {
    let ranked = top_m(logits, k, false);
    match selection {
        Selection::TopK => PredictionSet::new(ranked),
        Selection::Threshold => PredictionSet::new(ranked.into_iter().filter(|&e| logits[e] > 0.0)),
    }
}

/// Trains a model with per-example SGD on mean BCE. Examples are every
/// (token, layer) step of `traces`, reshuffled each epoch with the seeded
/// generator. Stops early once the epoch-mean loss has improved by less
/// than 1e-5 for three consecutive epochs.
pub fn train(traces: &[PromptTrace], shape: &ModelShape, config: &LearnerConfig) -> Result<LinearModel> {
    if traces.is_empty() {
        return Err(Error::config("training needs at least one trace"));
    }
    let mut model = LinearModel::new(*shape, *config)?;
    let data = build_dataset(traces, shape, config.decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let e = shape.num_experts;
    let inv_e = 1.0 / e as f64;
    let lr = config.learning_rate;
    let mut z = vec![0.0; e];
    let mut y = vec![0.0; e];
    let mut stale = 0;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (idx, val, labels) = data.example(i);
            for (zo, row) in z.iter_mut().zip(&model.weights) {
                *zo = idx.iter().zip(val).map(|(&j, &v)| row[j as usize] * f64::from(v)).sum();
            }
            y.iter_mut().for_each(|v| *v = 0.0);
            for &l in labels {
                y[usize::from(l)] = 1.0;
            }
            let mut loss = 0.0;
            for ((row, &zo), &yo) in model.weights.iter_mut().zip(&z).zip(&y) {
                loss += bce(zo, yo);
                let step = lr * (sigmoid(zo) - yo) * inv_e;
                for (&j, &v) in idx.iter().zip(val) {
                    row[j as usize] -= step * f64::from(v);
                }
            }
            total += loss * inv_e;
        }
        let epoch_loss = total / data.len() as f64;
        if let Some(&prev) = model.loss_history.last() {
            if prev - epoch_loss < EARLY_STOP_MIN_DELTA {
                stale += 1;
            } else {
                stale = 0;
            }
        }
        model.loss_history.push(epoch_loss);
        if stale >= EARLY_STOP_PATIENCE {
            break;
        }
    }
    model.trained = true;
    model.validate()?;
    Ok(model)
}

/// Predictor backed by a trained [`LinearModel`].
#[derive(Debug, Clone)]
pub struct LearnedLinearPredictor {
    model: Arc<LinearModel>,
    selection: Selection,
}

impl LearnedLinearPredictor {
    pub fn new(model: Arc<LinearModel>) -> Self {
        Self {
            model,
            selection: Selection::TopK,
        }
    }

    pub fn with_selection(mut self, selection: Selection) -> Self {
        self.selection = selection;
        self
    }
}

impl Predictor for LearnedLinearPredictor {
    fn name(&self) -> &'static str {
        "learned_linear"
    }

    fn history_decay(&self) -> f64 {
        self.model.config.decay
    }

    fn predict(&self, ctx: &PredictionContext<'_>) -> Result<Option<PredictionSet>> {
        if ctx.history.decay() != self.model.config.decay {
            return Err(Error::config(format!(
                "history decay {} does not match the model's {}",
                ctx.history.decay(),
                self.model.config.decay
            )));
        }
        let x = featurize(ctx, &self.model.shape)?;
        self.model
            .predict_topk(x.as_slice(), ctx.budget, self.selection)
            .map(Some)
    }
}
