mod common;

use std::sync::Arc;

use moe_prefetch::engine::collect_predictions;
use moe_prefetch::learner::{feature_len, LearnedLinearPredictor};
use moe_prefetch::metrics::macro_f1;
use moe_prefetch::{train, CacheConfig, LearnerConfig, LinearModel, ModelShape, PromptTrace, ReplayConfig};
use rand::seq::index::sample;
use rand::Rng;

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = common::rng(77);
    // Fourth-order central stencil: truncation error O(h^4) and rounding
    // noise ~1e-13, well below the 1e-5 relative bound even for tiny entries.
    let h = 1e-3;
    for _ in 0..20 {
        let shape = ModelShape::new(rng.gen_range(1..5), rng.gen_range(2..8), 1).unwrap();
        let d = feature_len(&shape);
        let weights: Vec<Vec<f64>> = (0..shape.num_experts)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let mut model = LinearModel::from_weights(shape, LearnerConfig::default(), weights).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k = rng.gen_range(0..=shape.num_experts);
        let labels = sample(&mut rng, shape.num_experts, k).into_vec();

        let (_, grad) = model.loss_and_gradient(&x, &labels).unwrap();
        for e in 0..shape.num_experts {
            for j in 0..d {
                let w0 = model.weights()[e][j];
                let mut at = |delta: f64| {
                    model.weights_mut()[e][j] = w0 + delta;
                    model.loss(&x, &labels).unwrap()
                };
                let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
                model.weights_mut()[e][j] = w0;
                let analytic = grad[e][j];
                let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(rel <= 1e-5, "d/dw[{e}][{j}]: analytic {analytic} numeric {numeric} rel {rel}");
            }
        }
    }
}

/// Layer `l` always routes to experts `(l + i) mod E` for `i < top_k`.
fn layer_rule_traces(shape: &ModelShape, first: u64, prompts: u64, tokens: usize) -> Vec<PromptTrace> {
    (first..first + prompts)
        .map(|p| {
            common::trace_from(p, tokens, shape, |_, l| {
                (0..shape.top_k).map(|i| (l + i) % shape.num_experts).collect()
            })
        })
        .collect()
}

fn learned_f1(model: LinearModel, traces: &[PromptTrace], shape: ModelShape) -> f64 {
    let predictor = LearnedLinearPredictor::new(Arc::new(model));
    let config = ReplayConfig::new(shape, 0, CacheConfig::fraction(0.1, shape.top_k));
    let steps = collect_predictions(traces, &predictor, &config, 1).unwrap();
    let pred: Vec<&[usize]> = steps.iter().map(|s| s.predicted.as_slice()).collect();
    let truth: Vec<&[usize]> = steps.iter().map(|s| s.truth.as_slice()).collect();
    macro_f1(&pred, &truth, shape.num_experts, false).unwrap()
}

#[test]
fn layer_rule_is_learned_to_held_out_f1_099() {
    let shape = ModelShape::new(8, 16, 3).unwrap();
    let train_set = layer_rule_traces(&shape, 0, 10, 16);
    let held_out = layer_rule_traces(&shape, 1000, 5, 16);
    let model = train(&train_set, &shape, &LearnerConfig::default()).unwrap();
    let f1 = learned_f1(model, &held_out, shape);
    assert!(f1 >= 0.99, "held-out macro F1 {f1}");
}

#[test]
fn training_loss_falls_on_learnable_data() {
    let shape = ModelShape::new(4, 12, 2).unwrap();
    let traces = layer_rule_traces(&shape, 0, 4, 12);
    let model = train(&traces, &shape, &LearnerConfig { epochs: 6, ..Default::default() }).unwrap();
    let losses = model.loss_history();
    assert!(losses.len() >= 2);
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let shape = ModelShape::new(3, 8, 2).unwrap();
    let mut rng = common::rng(3);
    let traces: Vec<PromptTrace> = (0..3).map(|p| common::random_trace(p, 10, &shape, &mut rng)).collect();
    let config = LearnerConfig { epochs: 3, seed: 42, ..Default::default() };
    let a = train(&traces, &shape, &config).unwrap();
    let b = train(&traces, &shape, &config).unwrap();
    assert_eq!(a.weights(), b.weights());
    assert_eq!(a.loss_history(), b.loss_history());
}
