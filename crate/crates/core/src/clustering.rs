//! Spherical k-means: k-means over L2-normalized vectors with cosine
//! similarity as the affinity.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::rng::SplitMix64;

pub const DEFAULT_GROUPS: usize = 5;
pub const MAX_ITERATIONS: usize = 100;
pub const RELATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("number of clusters must be positive")]
    ZeroGroups,
    #[error("{groups} clusters requested but only {distinct} distinct vectors")]
    TooFewDistinct { groups: usize, distinct: usize },
    #[error("vector `{0}` is zero; cosine similarity is undefined")]
    ZeroVector(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no centroids")]
    NoCentroids,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// `(sample id, cluster id)` in input order.
    pub assignments: Vec<(String, usize)>,
    /// Unit-norm centroids indexed by cluster id.
    pub centroids: Vec<EmbeddingVector>,
    pub groups: usize,
    pub iterations_run: usize,
    /// Total `1 - cos` dissimilarity after each iteration.
    pub inertia_history: Vec<f64>,
}

/// One line of the assignment export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub id: String,
    pub cluster: usize,
}

impl ClusterAssignment {
    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.assignments.iter().find(|(i, _)| i == id).map(|&(_, c)| c)
    }

    pub fn lookup(&self) -> HashMap<&str, usize> {
        self.assignments.iter().map(|(id, c)| (id.as_str(), *c)).collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups];
        for &(_, c) in &self.assignments {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn records(&self) -> impl Iterator<Item = AssignmentRecord> + '_ {
        self.assignments.iter().map(|(id, c)| AssignmentRecord {
            id: id.clone(),
            cluster: *c,
        })
    }

    /// Every id in one cluster; used when clustering is disabled.
    pub fn single_cluster<'a, I: IntoIterator<Item = &'a str>>(ids: I) -> Self {
        Self {
            assignments: ids.into_iter().map(|id| (id.to_owned(), 0)).collect(),
            centroids: Vec::new(),
            groups: 1,
            iterations_run: 0,
            inertia_history: Vec::new(),
        }
    }

    /// Rebuilds an assignment from exported records.
    pub fn from_records(records: Vec<AssignmentRecord>) -> Result<Self, ClusterError> {
        let groups = records.iter().map(|r| r.cluster + 1).max().unwrap_or(0);
        if groups == 0 {
            return Err(ClusterError::ZeroGroups);
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(ClusterError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            assignments: records.into_iter().map(|r| (r.id, r.cluster)).collect(),
            centroids: Vec::new(),
            groups,
            iterations_run: 0,
            inertia_history: Vec::new(),
        })
    }
}

/// Index of the centroid with maximum cosine similarity; lowest index wins ties.
pub fn nearest_cluster(vector: &EmbeddingVector, centroids: &[EmbeddingVector]) -> Result<usize, ClusterError> {
    if centroids.is_empty() {
        return Err(ClusterError::NoCentroids);
    }
    let unit = vector.normalized().ok_or_else(|| ClusterError::ZeroVector(String::new()))?;
    Ok(argmax_cosine(&unit, centroids).0)
}

fn argmax_cosine(unit: &EmbeddingVector, centroids: &[EmbeddingVector]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let sim = unit.cosine(centroid);
        if sim > best.1 {
            best = (c, sim);
        }
    }
    best
}

pub fn kmeans_cosine(
    vectors: &[(String, EmbeddingVector)],
    groups: usize,
    seed: u64,
) -> Result<ClusterAssignment, ClusterError> {
    if groups == 0 {
        return Err(ClusterError::ZeroGroups);
    }
    let dim = vectors.first().map(|(_, v)| v.dim()).unwrap_or(0);
    let mut points = Vec::with_capacity(vectors.len());
    let mut ids = HashSet::new();
    for (id, v) in vectors {
        if v.dim() != dim {
            return Err(ClusterError::DimMismatch { expected: dim, got: v.dim() });
        }
        if !ids.insert(id.as_str()) {
            return Err(ClusterError::DuplicateId(id.clone()));
        }
        points.push(v.normalized().ok_or_else(|| ClusterError::ZeroVector(id.clone()))?);
    }
    let distinct = points
        .iter()
        .map(|p| p.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len();
    if groups > distinct {
        return Err(ClusterError::TooFewDistinct { groups, distinct });
    }

    let mut rng = SplitMix64::new(seed);
    let mut centroids = plus_plus_init(&points, groups, &mut rng);
    let mut labels: Vec<usize> = vec![usize::MAX; points.len()];
    let mut inertia_history = Vec::new();
    let mut iterations_run = 0;

    while iterations_run < MAX_ITERATIONS {
        iterations_run += 1;
        let mut changed = 0;
        for (label, p) in labels.iter_mut().zip(&points) {
            let c = argmax_cosine(p, &centroids).0;
            if *label != c {
                *label = c;
                changed += 1;
            }
        }
        changed += repair_empty(&points, &mut labels, &mut centroids);
        centroids = recompute_centroids(&points, &labels, &centroids);

        let inertia = inertia(&points, &labels, &centroids);
        let relative = inertia_history
            .last()
            .map(|&prev: &f64| (prev - inertia).abs() / prev.abs().max(f64::MIN_POSITIVE));
        inertia_history.push(inertia);
        // A step without reassignments leaves the centroids bit-identical, so
        // the labels are then exactly the nearest-centroid labels.
        if changed == 0 && relative.is_none_or(|r| r < RELATIVE_TOLERANCE) {
            break;
        }
    }

    Ok(ClusterAssignment {
        assignments: vectors.iter().map(|(id, _)| id.clone()).zip(labels).collect(),
        centroids,
        groups,
        iterations_run,
        inertia_history,
    })
}

fn dissimilarity(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    (1.0 - a.dot(b)).max(0.0)
}

/// k-means++ over unit vectors: first centroid uniform, then each next one
/// drawn with probability proportional to `1 - max cos` to chosen centroids
/// (half the squared Euclidean distance on the unit sphere).
fn plus_plus_init(points: &[EmbeddingVector], groups: usize, rng: &mut SplitMix64) -> Vec<EmbeddingVector> {
    let first = rng.below(points.len() as u64) as usize;
    let mut centroids = vec![points[first].clone()];
    let mut weights: Vec<f64> = points.iter().map(|p| dissimilarity(p, &centroids[0])).collect();
    while centroids.len() < groups {
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.next_f64() * total;
            let mut chosen = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            // Only reachable through rounding: fall back to the first point
            // not equal to a chosen centroid.
            points
                .iter()
                .position(|p| centroids.iter().all(|c| c != p))
                .unwrap_or(0)
        };
        let c = points[pick].clone();
        for (w, p) in weights.iter_mut().zip(points) {
            *w = w.min(dissimilarity(p, &c));
        }
        weights[pick] = 0.0;
        centroids.push(c);
    }
    centroids
}

/// Gives each empty cluster the point farthest from its current centroid,
/// taken from a cluster with at least two members. Returns the number of moves.
fn repair_empty(points: &[EmbeddingVector], labels: &mut [usize], centroids: &mut [EmbeddingVector]) -> usize {
    let mut moves = 0;
    loop {
        let mut sizes = vec![0usize; centroids.len()];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return moves;
        };
        let mut farthest: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            let sim = p.dot(&centroids[labels[i]]);
            if farthest.is_none_or(|(_, s)| sim < s) {
                farthest = Some((i, sim));
            }
        }
        let (i, _) = farthest.expect("a cluster with two or more members exists when one is empty");
        labels[i] = empty;
        centroids[empty] = points[i].clone();
        moves += 1;
    }
}

fn recompute_centroids(points: &[EmbeddingVector], labels: &[usize], previous: &[EmbeddingVector]) -> Vec<EmbeddingVector> {
    let dim = points[0].dim();
    let mut sums = vec![vec![0.0; dim]; previous.len()];
    for (p, &l) in points.iter().zip(labels) {
        for (s, x) in sums[l].iter_mut().zip(p.values()) {
            *s += x;
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(c, sum)| {
            EmbeddingVector::new(sum)
                .ok()
                .and_then(|v| v.normalized())
                // Members cancel out exactly: keep the previous direction.
                .unwrap_or_else(|| previous[c].clone())
        })
        .collect()
}

fn inertia(points: &[EmbeddingVector], labels: &[usize], centroids: &[EmbeddingVector]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| 1.0 - p.dot(&centroids[l])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn named(points: Vec<EmbeddingVector>) -> Vec<(String, EmbeddingVector)> {
        points.into_iter().enumerate().map(|(i, p)| (format!("p{i}"), p)).collect()
    }

    fn random_instance(seed: u64, n: usize, dim: usize) -> Vec<(String, EmbeddingVector)> {
        let mut rng = SplitMix64::new(seed);
        named((0..n).map(|_| v(&(0..dim).map(|_| rng.next_f64() * 2.0 - 1.0).collect::<Vec<_>>())).collect())
    }

    #[test]
    fn single_cluster_centroid_is_mean_direction() {
        let pts = named(vec![v(&[1.0, 0.0]), v(&[0.0, 2.0]), v(&[3.0, 3.0])]);
        let out = kmeans_cosine(&pts, 1, 7).unwrap();
        assert!(out.assignments.iter().all(|(_, c)| *c == 0));
        let s = 1.0 / 2f64.sqrt();
        // normalized inputs: (1,0), (0,1), (s,s) -> mean direction (1+s, 1+s)
        assert!((out.centroids[0].values()[0] - s).abs() < 1e-12);
        assert!((out.centroids[0].values()[1] - s).abs() < 1e-12);
    }

    #[test]
    fn saturation_gives_singletons() {
        let pts = random_instance(3, 7, 4);
        let out = kmeans_cosine(&pts, 7, 1).unwrap();
        let mut clusters: Vec<usize> = out.assignments.iter().map(|(_, c)| *c).collect();
        clusters.sort_unstable();
        assert_eq!(clusters, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn recovers_two_bundles() {
        let mut rng = SplitMix64::new(11);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..40 {
            let bundle = i % 2;
            let mut jitter = || (rng.next_f64() - 0.5) * 0.05;
            let mut base = if bundle == 0 { vec![1.0, 0.0, 0.0, 0.0] } else { vec![0.0, 0.0, 1.0, 0.0] };
            for x in base.iter_mut() {
                *x += jitter();
            }
            pts.push(v(&base));
            truth.push(bundle);
        }
        for (i, a) in pts.iter().enumerate() {
            for (j, b) in pts.iter().enumerate() {
                let c = a.cosine(b);
                if truth[i] == truth[j] {
                    assert!(c >= 0.99);
                } else {
                    assert!(c <= 0.1);
                }
            }
        }
        let out = kmeans_cosine(&named(pts), 2, 5).unwrap();
        let first = out.assignments[0].1;
        for ((_, c), t) in out.assignments.iter().zip(&truth) {
            assert_eq!(*c == first, *t == truth[0]);
        }
    }

    #[test]
    fn nearest_cluster_rules() {
        let cents = vec![v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[-1.0, 0.0])];
        assert_eq!(nearest_cluster(&cents[2], &cents).unwrap(), 2);
        assert_eq!(nearest_cluster(&v(&[1.0, 1.0]), &cents).unwrap(), 0);
        assert!(matches!(nearest_cluster(&v(&[0.0, 0.0]), &cents), Err(ClusterError::ZeroVector(_))));
        assert_eq!(nearest_cluster(&v(&[1.0, 0.0]), &[]), Err(ClusterError::NoCentroids));
    }

    #[test]
    fn nearest_cluster_matches_exhaustive_scan() {
        let mut rng = SplitMix64::new(21);
        for _ in 0..200 {
            let cents: Vec<_> = (0..5)
                .map(|_| v(&(0..6).map(|_| rng.next_f64() - 0.5).collect::<Vec<_>>()).normalized().unwrap())
                .collect();
            let q = v(&(0..6).map(|_| rng.next_f64() - 0.5).collect::<Vec<_>>());
            let qn = q.norm();
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (i, c) in cents.iter().enumerate() {
                let sim: f64 = q.values().iter().zip(c.values()).map(|(a, b)| a * b).sum::<f64>() / qn;
                if sim > best_sim {
                    best_sim = sim;
                    best = i;
                }
            }
            assert_eq!(nearest_cluster(&q, &cents).unwrap(), best);
        }
    }

    #[test]
    fn input_errors() {
        let pts = named(vec![v(&[1.0, 0.0]), v(&[2.0, 0.0]), v(&[0.0, 1.0])]);
        // (1,0) and (2,0) coincide after normalization
        assert_eq!(
            kmeans_cosine(&pts, 3, 0).unwrap_err(),
            ClusterError::TooFewDistinct { groups: 3, distinct: 2 }
        );
        let with_zero = named(vec![v(&[1.0, 0.0]), v(&[0.0, 0.0])]);
        assert!(matches!(kmeans_cosine(&with_zero, 1, 0), Err(ClusterError::ZeroVector(_))));
        assert_eq!(kmeans_cosine(&pts, 0, 0).unwrap_err(), ClusterError::ZeroGroups);
    }

    #[test]
    fn records_roundtrip() {
        let pts = random_instance(8, 12, 3);
        let out = kmeans_cosine(&pts, 3, 2).unwrap();
        let back = ClusterAssignment::from_records(out.records().collect()).unwrap();
        assert_eq!(back.assignments, out.assignments);
        assert_eq!(back.groups, 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn converged_labels_are_nearest_centroids(seed in any::<u64>(), n in 5usize..60, g in 1usize..6) {
            let pts = random_instance(seed, n, 6);
            let out = kmeans_cosine(&pts, g, seed ^ 0xabc).unwrap();
            prop_assert!(out.iterations_run <= MAX_ITERATIONS);
            for ((_, p), (_, c)) in pts.iter().zip(&out.assignments) {
                prop_assert_eq!(nearest_cluster(p, &out.centroids).unwrap(), *c);
            }
            prop_assert!(out.cluster_sizes().iter().all(|&s| s > 0));
            for c in &out.centroids {
                prop_assert!((c.norm() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn inertia_never_increases(seed in any::<u64>(), n in 5usize..60, g in 1usize..6) {
            let pts = random_instance(seed, n, 4);
            let out = kmeans_cosine(&pts, g, seed).unwrap();
            for w in out.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", out.inertia_history);
            }
        }

        #[test]
        fn deterministic_for_fixed_seed(seed in any::<u64>()) {
            let pts = random_instance(seed, 30, 5);
            prop_assert_eq!(kmeans_cosine(&pts, 4, seed).unwrap(), kmeans_cosine(&pts, 4, seed).unwrap());
        }
    }
}
