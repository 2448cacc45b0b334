#![allow(dead_code)]

use std::collections::HashSet;

use moe_prefetch::{ModelShape, PromptTrace, TokenRecord};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A trace whose experts come from `pick(token, layer)`.
pub fn trace_from(
    prompt_id: u64,
    tokens: usize,
    shape: &ModelShape,
    mut pick: impl FnMut(usize, usize) -> Vec<usize>,
) -> PromptTrace {
    let mut records = Vec::with_capacity(tokens * shape.num_layers);
    for t in 0..tokens {
        for l in 0..shape.num_layers {
            records.push(TokenRecord::new(prompt_id, t, l, pick(t, l), 0));
        }
    }
    PromptTrace::new(prompt_id, records, shape).expect("valid trace")
}

/// Uniformly random routing.
pub fn random_trace(prompt_id: u64, tokens: usize, shape: &ModelShape, rng: &mut impl Rng) -> PromptTrace {
    trace_from(prompt_id, tokens, shape, |_, _| {
        sample(rng, shape.num_experts, shape.top_k).into_vec()
    })
}

/// Number of distinct `(layer, expert)` keys touched at or after `from_token`
/// that were not already touched before it.
pub fn distinct_keys(trace: &PromptTrace, from_token: usize) -> usize {
    let mut seen = HashSet::new();
    let mut fresh = 0;
    for t in 0..trace.num_tokens() {
        for l in 0..trace.num_layers() {
            for &e in trace.experts(t, l) {
                if seen.insert((l, e)) && t >= from_token {
                    fresh += 1;
                }
            }
        }
    }
    fresh
}
