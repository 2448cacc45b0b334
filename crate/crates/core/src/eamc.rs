//! Expert Activation Matrix Collection (EAMC).
//!
//! Stores sketches of training prompts, either the most recent `N` rEAMs or
//! `k` k-means centroids, and answers nearest-sketch queries by cosine
//! similarity.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cosine_similarity, Eam, ModelShape, SketchVector};

pub const DEFAULT_RECENT_CAPACITY: usize = 100;
pub const DEFAULT_KMEANS_K: usize = 32;
pub const DEFAULT_KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EamcMode {
    Recent,
    Kmeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EamcConfig {
    pub mode: EamcMode,
    /// Maximum sketches in recent mode, `k` in k-means mode.
    pub capacity: usize,
    /// Threshold counts to 0/1 before normalization.
    pub binarize: bool,
    pub kmeans_max_iters: usize,
    pub seed: u64,
}

impl EamcConfig {
    pub fn recent(capacity: usize) -> Self {
        Self {
            mode: EamcMode::Recent,
            capacity,
            binarize: false,
            kmeans_max_iters: DEFAULT_KMEANS_MAX_ITERS,
            seed: 0,
        }
    }

    pub fn kmeans(k: usize, seed: u64) -> Self {
        Self {
            mode: EamcMode::Kmeans,
            capacity: k,
            binarize: false,
            kmeans_max_iters: DEFAULT_KMEANS_MAX_ITERS,
            seed,
        }
    }
}

impl Default for EamcConfig {
    fn default() -> Self {
        Self::kmeans(DEFAULT_KMEANS_K, 0)
    }
}

/// Output of [`kmeans`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub objective: f64,
    /// Number of clusters actually used; smaller than requested when there
    /// are fewer points than `k`.
    pub k: usize,
    /// Objective after the initial assignment and after every Lloyd step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for `point`. Keeps `current` on exact ties so that a
/// stable assignment is a fixed point; otherwise the lowest index wins.
fn nearest(point: &[f64], centroids: &[Vec<f64>], current: Option<usize>) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    if let Some(cur) = current {
        let d = sq_dist(point, &centroids[cur]);
        if d <= best_d {
            return (cur, d);
        }
    }
    (best, best_d)
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance to the closest chosen center. When every point already sits on
/// a center the lowest-index unchosen point is taken.
fn kmeanspp_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[pick] = true;
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[pick]));
        }
        centroids.push(points[pick].to_vec());
    }
    centroids
}

/// Lloyd's algorithm with seeded k-means++ initialization and Euclidean
/// distance. Stops when assignments stop changing or after `max_iters`
/// update steps. An empty cluster is re-seeded with the point farthest from
/// its own centroid.
pub fn kmeans<V: AsRef<[f64]>>(
    vectors: &[V],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult> {
    if vectors.is_empty() {
        return Err(Error::config("k-means needs at least one vector"));
    }
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let points: Vec<&[f64]> = vectors.iter().map(AsRef::as_ref).collect();
    let dim = points[0].len();
    for p in &points {
        if p.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: p.len(),
            });
        }
    }
    let k = k.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(&points, k, &mut rng);

    let mut assignments = Vec::with_capacity(points.len());
    let mut objective = 0.0;
    for p in &points {
        let (c, d) = nearest(p, &centroids, None);
        assignments.push(c);
        objective += d;
    }
    let mut history = vec![objective];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        iterations += 1;
        update_centroids(&points, &assignments, &mut centroids);

        let mut changed = false;
        objective = 0.0;
        for (a, p) in assignments.iter_mut().zip(&points) {
            let (c, d) = nearest(p, &centroids, Some(*a));
            changed |= c != *a;
            *a = c;
            objective += d;
        }
        history.push(objective);
        if !changed {
            converged = true;
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        objective,
        k,
        objective_history: history,
        iterations,
        converged,
    })
}

fn update_centroids(points: &[&[f64]], assignments: &[usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut sizes = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        sizes[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&sizes) {
        if n > 0 {
            *c = s.into_iter().map(|x| x / n as f64).collect();
        }
    }

    let empty: Vec<usize> = (0..k).filter(|&c| sizes[c] == 0).collect();
    if empty.is_empty() {
        return;
    }
    let mut taken = vec![false; points.len()];
    for c in empty {
        let far = points
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i]])))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = far {
            taken[i] = true;
            centroids[c] = points[i].to_vec();
        }
    }
}

/// Similarities closer than this are treated as equal when matching, so
/// mathematically tied sketches resolve to the lowest index regardless of
/// rounding.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Lowest index whose value is within [`TIE_TOLERANCE`] of the maximum.
pub(crate) fn first_best(sims: &[f64]) -> (usize, f64) {
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let idx = sims.iter().position(|&s| max - s <= TIE_TOLERANCE).unwrap_or(0);
    (idx, max)
}

/// A built collection of sketches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eamc {
    pub config: EamcConfig,
    pub shape: ModelShape,
    sketches: Vec<SketchVector>,
}

/// Sketch of one rEAM under `config` (optional binarization, then row
/// normalization).
pub fn sketch(ream: &Eam, config: &EamcConfig) -> SketchVector {
    if config.binarize {
        ream.binarized().normalize()
    } else {
        ream.normalize()
    }
}

impl Eamc {
    /// Wraps precomputed sketches.
    pub fn from_sketches(
        shape: ModelShape,
        config: EamcConfig,
        sketches: Vec<SketchVector>,
    ) -> Result<Self> {
        let eamc = Self {
            config,
            shape,
            sketches,
        };
        eamc.validate()?;
        Ok(eamc)
    }

    fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.config.capacity == 0 {
            return Err(Error::config("EAMC capacity must be at least 1"));
        }
        if self.sketches.len() > self.config.capacity {
            return Err(Error::config(format!(
                "{} sketches exceed capacity {}",
                self.sketches.len(),
                self.config.capacity
            )));
        }
        let len = self.shape.total_experts();
        for s in &self.sketches {
            if s.len() != len {
                return Err(Error::Dimension {
                    expected: len,
                    got: s.len(),
                });
            }
            if s.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::config("sketch values must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn sketches(&self) -> &[SketchVector] {
        &self.sketches
    }

    pub fn len(&self) -> usize {
        self.sketches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sketches.is_empty()
    }

    /// Index and cosine similarity of the sketch most similar to `query`;
    /// ties (within [`TIE_TOLERANCE`]) go to the lowest index.
    pub fn match_nearest(&self, query: &[f64]) -> Result<(usize, f64)> {
        if self.sketches.is_empty() {
            return Err(Error::NoSketches);
        }
        let sims = self
            .sketches
            .iter()
            .map(|s| cosine_similarity(query, s.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        Ok(first_best(&sims))
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let eamc: Eamc = serde_json::from_reader(reader)?;
        eamc.validate()?;
        Ok(eamc)
    }

    pub fn write_json<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer(&mut writer, self)?;
        writer.write_all(b"\n")?;
        Ok(())
    }
}

/// Builds an EAMC from training rEAMs.
pub fn build_eamc(reams: &[Eam], config: &EamcConfig) -> Result<Eamc> {
    let first = reams
        .first()
        .ok_or_else(|| Error::config("building an EAMC needs at least one rEAM"))?;
    if config.capacity == 0 {
        return Err(Error::config("EAMC capacity must be at least 1"));
    }
    let shape = *first.shape();
    if let Some(bad) = reams.iter().find(|r| *r.shape() != shape) {
        return Err(Error::Dimension {
            expected: shape.total_experts(),
            got: bad.shape().total_experts(),
        });
    }
    let sketches = match config.mode {
        EamcMode::Recent => {
            let start = reams.len().saturating_sub(config.capacity);
            reams[start..].iter().map(|r| sketch(r, config)).collect()
        }
        EamcMode::Kmeans => {
            let vectors: Vec<SketchVector> = reams.iter().map(|r| sketch(r, config)).collect();
            let fit = kmeans(&vectors, config.capacity, config.seed, config.kmeans_max_iters)?;
            fit.centroids.into_iter().map(SketchVector::new).collect()
        }
    };
    Eamc::from_sketches(shape, config.clone(), sketches)
}

impl AsRef<[f64]> for SketchVector {
    fn as_ref(&self) -> &[f64] {
        self.as_slice()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 8.0]];
        let fit = kmeans(&pts, 1, 3, 100).unwrap();
        assert_eq!(fit.k, 1);
        assert_abs_diff_eq!(fit.centroids[0][0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.centroids[0][1], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn kmeans_k_equals_n_has_zero_objective() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 8.0], vec![2.0, 3.0]];
        let fit = kmeans(&pts, 4, 9, 100).unwrap();
        assert_eq!(fit.objective, 0.0);
        // k larger than the point count is clamped, not an error
        let fit = kmeans(&pts, 10, 9, 100).unwrap();
        assert_eq!(fit.k, 4);
        assert_eq!(fit.objective, 0.0);
    }

    #[test]
    fn kmeans_two_clusters() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 10.0],
            vec![10.0, 11.0],
        ];
        for seed in 0..20 {
            let fit = kmeans(&pts, 2, seed, 100).unwrap();
            let mut cs = fit.centroids.clone();
            cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
            assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 10.5]]);
            assert_eq!(fit.objective, 1.0);
            assert!(fit.converged);
        }
    }

    #[test]
    fn kmeans_dimension_mismatch() {
        let pts = vec![vec![0.0, 0.0], vec![1.0]];
        assert!(matches!(kmeans(&pts, 1, 0, 10), Err(Error::Dimension { .. })));
    }

    fn shape() -> ModelShape {
        ModelShape::new(1, 4, 2).unwrap()
    }

    fn ream(counts: Vec<u32>) -> Eam {
        Eam::from_counts(shape(), counts).unwrap()
    }

    #[test]
    fn recent_mode_keeps_last_n() {
        let reams = vec![ream(vec![1, 1, 0, 0]), ream(vec![0, 1, 1, 0]), ream(vec![0, 0, 1, 1])];
        let eamc = build_eamc(&reams, &EamcConfig::recent(2)).unwrap();
        assert_eq!(eamc.len(), 2);
        assert_eq!(eamc.sketches()[0].as_slice(), &[0.0, 0.5, 0.5, 0.0]);
        assert_eq!(eamc.sketches()[1].as_slice(), &[0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn kmeans_mode_k1() {
        let reams = vec![ream(vec![2, 2, 0, 0]), ream(vec![0, 0, 1, 1])];
        let eamc = build_eamc(&reams, &EamcConfig::kmeans(1, 5)).unwrap();
        assert_eq!(eamc.len(), 1);
        assert_eq!(eamc.sketches()[0].as_slice(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn binarize_thresholds_before_normalizing() {
        let mut cfg = EamcConfig::recent(1);
        cfg.binarize = true;
        let eamc = build_eamc(&[ream(vec![5, 0, 2, 0])], &cfg).unwrap();
        assert_eq!(eamc.sketches()[0].as_slice(), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn match_examples() {
        let s3 = ModelShape::new(1, 3, 1).unwrap();
        let eamc = Eamc::from_sketches(
            s3,
            EamcConfig::recent(4),
            vec![vec![1.0, 0.0, 0.0].into(), vec![0.0, 1.0, 0.0].into()],
        )
        .unwrap();
        let (idx, sim) = eamc.match_nearest(&[0.9, 0.1, 0.0]).unwrap();
        assert_eq!(idx, 0);
        assert_abs_diff_eq!(sim, 0.9 / 0.82f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(sim, 0.99388, epsilon = 1e-5);

        assert_eq!(eamc.match_nearest(&[0.0, 0.0, 0.0]).unwrap(), (0, 0.0));

        let single = Eamc::from_sketches(s3, EamcConfig::recent(1), vec![vec![0.0, 0.0, 1.0].into()])
            .unwrap();
        assert_eq!(single.match_nearest(&[1.0, 0.0, 0.0]).unwrap().0, 0);

        let empty = Eamc::from_sketches(s3, EamcConfig::recent(1), vec![]).unwrap();
        assert!(matches!(empty.match_nearest(&[1.0, 0.0, 0.0]), Err(Error::NoSketches)));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let reams = vec![ream(vec![1, 2, 0, 0]), ream(vec![0, 3, 1, 0]), ream(vec![7, 0, 0, 1])];
        let eamc = build_eamc(&reams, &EamcConfig::kmeans(2, 1)).unwrap();
        let mut buf = Vec::new();
        eamc.write_json(&mut buf).unwrap();
        assert_eq!(Eamc::read_json(buf.as_slice()).unwrap(), eamc);
    }
}
