//! Activation-trace domain types and Expert Activation Matrices.
//!
//! An EAM is an `L x E` count matrix. A per-token matrix (iEAM) has one
//! nonzero row per routed layer; accumulating every token of a prompt gives
//! the request-level matrix (rEAM). Sketches are row-normalized, row-major
//! (layer-major, expert-minor) flattenings used for cosine matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of layers, experts per layer and experts activated per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
}

impl Default for ModelShape {
    /// 27 MoE layers, 64 routed experts, 6 active per token.
    fn default() -> Self {
        Self {
            num_layers: 27,
            num_experts: 64,
            top_k: 6,
        }
    }
}

impl ModelShape {
    pub fn new(num_layers: usize, num_experts: usize, top_k: usize) -> Result<Self> {
        let shape = Self {
            num_layers,
            num_experts,
            top_k,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be at least 1"));
        }
        if self.num_experts == 0 {
            return Err(Error::config("num_experts must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::config(format!(
                "top_k must be in [1, {}], got {}",
                self.num_experts, self.top_k
            )));
        }
        Ok(())
    }

    /// Total number of (layer, expert) slots, `L * E`.
    pub fn total_experts(&self) -> usize {
        self.num_layers * self.num_experts
    }

    pub fn check_layer(&self, layer_id: usize) -> Result<()> {
        if layer_id >= self.num_layers {
            return Err(Error::Range {
                what: "layer",
                index: layer_id,
                bound: self.num_layers,
            });
        }
        Ok(())
    }

    pub fn check_expert(&self, expert_id: usize) -> Result<()> {
        if expert_id >= self.num_experts {
            return Err(Error::Range {
                what: "expert",
                index: expert_id,
                bound: self.num_experts,
            });
        }
        Ok(())
    }
}

/// One logged routing event: the experts a token activated at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub prompt_id: u64,
    pub token_index: usize,
    pub layer_id: usize,
    /// Activated experts, kept sorted ascending.
    pub expert_ids: Vec<usize>,
    pub token_id: i64,
    pub embedding: Vec<f32>,
}

impl TokenRecord {
    /// Builds a record, sorting the expert list. Validation against a shape
    /// happens separately in [`TokenRecord::validate`].
    pub fn new(
        prompt_id: u64,
        token_index: usize,
        layer_id: usize,
        mut expert_ids: Vec<usize>,
        token_id: i64,
    ) -> Self {
        expert_ids.sort_unstable();
        Self {
            prompt_id,
            token_index,
            layer_id,
            expert_ids,
            token_id,
            embedding: Vec::new(),
        }
    }

    pub fn validate(&self, shape: &ModelShape) -> Result<()> {
        shape.check_layer(self.layer_id)?;
        validate_expert_set(&self.expert_ids, shape)
    }
}

/// Checks that `experts` holds exactly `top_k` distinct in-range IDs.
pub(crate) fn validate_expert_set(experts: &[usize], shape: &ModelShape) -> Result<()> {
    if experts.len() != shape.top_k {
        return Err(Error::config(format!(
            "expected {} expert ids, got {}",
            shape.top_k,
            experts.len()
        )));
    }
    check_distinct_in_range(experts, shape.num_experts)
}

pub(crate) fn check_distinct_in_range(experts: &[usize], num_experts: usize) -> Result<()> {
    let mut seen = vec![false; num_experts];
    for &e in experts {
        if e >= num_experts {
            return Err(Error::Range {
                what: "expert",
                index: e,
                bound: num_experts,
            });
        }
        if seen[e] {
            return Err(Error::config(format!("duplicate expert id {e}")));
        }
        seen[e] = true;
    }
    Ok(())
}

/// All routing records of one prompt, ordered by `(token_index, layer_id)`.
///
/// Every token index in `0..num_tokens` has exactly one record per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTrace {
    pub prompt_id: u64,
    records: Vec<TokenRecord>,
    num_layers: usize,
}

impl PromptTrace {
    /// Sorts and validates `records` against `shape`.
    pub fn new(prompt_id: u64, mut records: Vec<TokenRecord>, shape: &ModelShape) -> Result<Self> {
        let invalid = |message: String| Error::Validation { prompt_id, message };
        for r in &records {
            if r.prompt_id != prompt_id {
                return Err(invalid(format!(
                    "record for prompt {} in trace of prompt {prompt_id}",
                    r.prompt_id
                )));
            }
            r.validate(shape).map_err(|e| invalid(e.to_string()))?;
        }
        records.sort_by_key(|r| (r.token_index, r.layer_id));
        for pair in records.windows(2) {
            if (pair[0].token_index, pair[0].layer_id) == (pair[1].token_index, pair[1].layer_id) {
                return Err(invalid(format!(
                    "duplicate record for token {} layer {}",
                    pair[0].token_index, pair[0].layer_id
                )));
            }
        }
        let layers = shape.num_layers;
        if records.is_empty() {
            return Err(invalid("no records".into()));
        }
        for (i, r) in records.iter().enumerate() {
            let (token, layer) = (i / layers, i % layers);
            if r.token_index != token || r.layer_id != layer {
                return Err(invalid(format!(
                    "incomplete layer coverage: expected token {token} layer {layer}, found token {} layer {}",
                    r.token_index, r.layer_id
                )));
            }
        }
        if !records.len().is_multiple_of(layers) {
            let token = records.len() / layers;
            return Err(invalid(format!(
                "incomplete layer coverage: token {token} has {} of {layers} layers",
                records.len() % layers
            )));
        }
        Ok(Self {
            prompt_id,
            records,
            num_layers: layers,
        })
    }

    pub fn records(&self) -> &[TokenRecord] {
        &self.records
    }

    pub fn num_tokens(&self) -> usize {
        self.records.len() / self.num_layers
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn record(&self, token_index: usize, layer_id: usize) -> &TokenRecord {
        &self.records[token_index * self.num_layers + layer_id]
    }

    /// Ground-truth experts activated by `token_index` at `layer_id`.
    pub fn experts(&self, token_index: usize, layer_id: usize) -> &[usize] {
        &self.record(token_index, layer_id).expert_ids
    }

    /// The full request-level activation matrix of this prompt.
    pub fn ream(&self, shape: &ModelShape) -> Result<Eam> {
        let mut eam = Eam::zeros(*shape);
        for r in &self.records {
            eam.accumulate(r.layer_id, &r.expert_ids)?;
        }
        Ok(eam)
    }
}

/// Expert Activation Matrix: `L x E` activation counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Eam {
    shape: ModelShape,
    counts: Vec<u32>,
}

impl Eam {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            counts: vec![0; shape.total_experts()],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(shape: ModelShape, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != shape.total_experts() {
            return Err(Error::Dimension {
                expected: shape.total_experts(),
                got: counts.len(),
            });
        }
        Ok(Self { shape, counts })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn row(&self, layer_id: usize) -> &[u32] {
        let e = self.shape.num_experts;
        &self.counts[layer_id * e..(layer_id + 1) * e]
    }

    pub fn get(&self, layer_id: usize, expert_id: usize) -> u32 {
        self.counts[layer_id * self.shape.num_experts + expert_id]
    }

    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Adds one activation for each expert of `expert_ids` at `layer_id`.
    /// Indices are checked before any cell is touched.
    pub fn accumulate(&mut self, layer_id: usize, expert_ids: &[usize]) -> Result<()> {
        self.shape.check_layer(layer_id)?;
        for &e in expert_ids {
            self.shape.check_expert(e)?;
        }
        let base = layer_id * self.shape.num_experts;
        for &e in expert_ids {
            self.counts[base + e] += 1;
        }
        Ok(())
    }

    /// Cell-wise sum with another matrix of the same shape.
    pub fn merge(&mut self, other: &Eam) -> Result<()> {
        if other.shape != self.shape {
            return Err(Error::Dimension {
                expected: self.counts.len(),
                got: other.counts.len(),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Thresholds every count to 0/1.
    pub fn binarized(&self) -> Eam {
        Eam {
            shape: self.shape,
            counts: self.counts.iter().map(|&c| u32::from(c > 0)).collect(),
        }
    }

    /// Divides each row by its own sum (zero rows stay zero) and flattens
    /// row-major.
    pub fn normalize(&self) -> SketchVector {
        let e = self.shape.num_experts;
        let mut values = Vec::with_capacity(self.counts.len());
        for row in self.counts.chunks_exact(e) {
            let sum: u64 = row.iter().map(|&c| u64::from(c)).sum();
            if sum == 0 {
                values.extend(std::iter::repeat_n(0.0, e));
            } else {
                let sum = sum as f64;
                values.extend(row.iter().map(|&c| f64::from(c) / sum));
            }
        }
        SketchVector(values)
    }
}

/// A flattened, row-normalized activation sketch of length `L * E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SketchVector(Vec<f64>);

impl SketchVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The `num_experts` weights belonging to `layer_id`.
    pub fn block(&self, layer_id: usize, num_experts: usize) -> &[f64] {
        &self.0[layer_id * num_experts..(layer_id + 1) * num_experts]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for SketchVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// `dot(a, b) / (|a| |b|)`, or 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn shape(l: usize, e: usize, k: usize) -> ModelShape {
        ModelShape::new(l, e, k).unwrap()
    }

    #[test]
    fn accumulate_increments_one_row() {
        let mut eam = Eam::zeros(shape(2, 4, 2));
        eam.accumulate(0, &[1, 2]).unwrap();
        assert_eq!(eam.row(0), &[0, 1, 1, 0]);
        assert_eq!(eam.row(1), &[0, 0, 0, 0]);
        eam.accumulate(0, &[1, 3]).unwrap();
        assert_eq!(eam.row(0), &[0, 2, 1, 1]);
    }

    #[test]
    fn accumulate_rejects_out_of_range() {
        let mut eam = Eam::zeros(shape(2, 4, 2));
        match eam.accumulate(5, &[0, 1]) {
            Err(Error::Range { what: "layer", index: 5, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match eam.accumulate(1, &[0, 4]) {
            Err(Error::Range { what: "expert", index: 4, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        // nothing partially applied
        assert!(eam.is_zero());
    }

    #[test]
    fn normalize_rows() {
        let s = shape(2, 4, 2);
        let eam = Eam::from_counts(s, vec![2, 2, 0, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(eam.normalize().as_slice(), &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        assert_eq!(Eam::zeros(s).normalize(), SketchVector::zeros(8));

        let eam = Eam::from_counts(s, vec![1, 0, 0, 3, 0, 2, 0, 0]).unwrap();
        assert_eq!(
            eam.normalize().as_slice(),
            &[0.25, 0.0, 0.0, 0.75, 0.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / sqrt(14 * 77)
        let expected = 32.0 / (14.0f64 * 77.0).sqrt();
        let got = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.974631846, epsilon = 1e-9);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn prompt_trace_requires_full_layer_coverage() {
        let s = shape(4, 8, 2);
        let mut records: Vec<_> = (0..4)
            .map(|l| TokenRecord::new(0, 0, l, vec![0, 1], 1))
            .collect();
        records.remove(3);
        let err = PromptTrace::new(0, records, &s).unwrap_err();
        assert!(err.to_string().contains("incomplete layer coverage"), "{err}");
    }

    #[test]
    fn prompt_trace_sorts_records() {
        let s = shape(2, 4, 1);
        let records = vec![
            TokenRecord::new(3, 1, 1, vec![0], 0),
            TokenRecord::new(3, 0, 1, vec![1], 0),
            TokenRecord::new(3, 1, 0, vec![2], 0),
            TokenRecord::new(3, 0, 0, vec![3], 0),
        ];
        let t = PromptTrace::new(3, records, &s).unwrap();
        assert_eq!(t.num_tokens(), 2);
        assert_eq!(t.experts(0, 0), &[3]);
        assert_eq!(t.experts(1, 1), &[0]);
    }

    fn arb_records() -> impl Strategy<Value = (ModelShape, Vec<(usize, Vec<usize>)>)> {
        (1usize..5, 2usize..10).prop_flat_map(|(l, e)| {
            (1..=e).prop_flat_map(move |k| {
                let rec = (0..l, proptest::sample::subsequence((0..e).collect::<Vec<_>>(), k));
                (Just(ModelShape::new(l, e, k).unwrap()), proptest::collection::vec(rec, 0..40))
            })
        })
    }

    proptest! {
        #[test]
        fn accumulation_order_is_irrelevant((s, recs) in arb_records(), seed in any::<u64>()) {
            let mut forward = Eam::zeros(s);
            for (l, ex) in &recs {
                forward.accumulate(*l, ex).unwrap();
            }
            let mut shuffled = recs.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut backward = Eam::zeros(s);
            for (l, ex) in &shuffled {
                backward.accumulate(*l, ex).unwrap();
            }
            prop_assert_eq!(&forward, &backward);
            for l in 0..s.num_layers {
                let n = recs.iter().filter(|(rl, _)| *rl == l).count() as u32;
                prop_assert_eq!(forward.row(l).iter().sum::<u32>(), n * s.top_k as u32);
            }
        }

        #[test]
        fn normalize_is_scale_invariant(counts in proptest::collection::vec(0u32..50, 12), scale in 1u32..20) {
            let s = ModelShape::new(3, 4, 1).unwrap();
            let base = Eam::from_counts(s, counts.clone()).unwrap();
            let scaled = Eam::from_counts(s, counts.iter().map(|c| c * scale).collect()).unwrap();
            let (a, b) = (base.normalize(), scaled.normalize());
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
            for l in 0..3 {
                let sum: f64 = a.block(l, 4).iter().sum();
                prop_assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in proptest::collection::vec(0.0f64..10.0, 6),
            b in proptest::collection::vec(0.0f64..10.0, 6),
            c in 0.01f64..100.0,
        ) {
            let ab = cosine_similarity(&a, &b).unwrap();
            prop_assert!((ab - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            prop_assert!((ab - cosine_similarity(&scaled, &b).unwrap()).abs() < 1e-12);
            if a.iter().any(|&x| x != 0.0) {
                prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
