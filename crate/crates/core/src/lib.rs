//! Trace-driven simulation of expert prefetching for Mixture-of-Experts
//! inference under a capacity-bounded expert cache.
//!
//! The crate replays routing traces token by token and layer by layer. Before
//! each layer executes a [`predictors::Predictor`] names the experts to
//! prefetch into an LRU [`cache::ExpertCache`]; the engine then reveals the
//! experts the router actually chose and counts prediction and cache hits.
//!
//! Modules:
//! - [`model`]: traces, Expert Activation Matrices, sketches, cosine similarity
//! - [`trace_io`]: trace CSV, predictions JSONL, synthetic trace generator
//! - [`eamc`]: sketch collections built from recent rEAMs or k-means
//! - [`predictors`]: oracle, no-prefetch, next-layer-all, global frequency,
//!   EAM cosine matching, external predictions
//! - [`learner`]: linear multi-label predictor trained with BCE
//! - [`cache`]: LRU expert cache with step-pinned prefetch
//! - [`engine`]: replay, capacity sweeps, CSV reports
//! - [`metrics`]: exact-set accuracy, macro F1, activation reports

pub mod cache;
pub mod eamc;
pub mod engine;
pub mod error;
pub mod learner;
pub mod metrics;
pub mod model;
pub mod predictors;
pub mod trace_io;

pub use cache::{Access, CacheConfig, Capacity, ExpertCache, ExpertKey};
pub use eamc::{build_eamc, kmeans, Eamc, EamcConfig, EamcMode, KMeansResult};
pub use engine::{replay_prompt, sweep, ReplayConfig, SimReport, SweepReport};
pub use error::{Error, Result};
pub use learner::{train, LearnerConfig, LinearModel, Selection};
pub use model::{cosine_similarity, Eam, ModelShape, PromptTrace, SketchVector, TokenRecord};
pub use predictors::{
    build_predictor, PredictionContext, PredictionSet, Predictor, PredictorKind, PredictorState,
};
pub use trace_io::{
    generate_synthetic, parse_predictions, parse_trace_csv, write_trace_csv, GeneratorConfig,
    PredictionTable, StepKey,
};
