//! Semantic aggregation: grouping the states of one latent space into
//! clusters and assigning new states to them.

use std::collections::BTreeMap;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RESTARTS: usize = 10;
pub const MAX_LLOYD_ITERATIONS: usize = 300;
/// Upper end of the automatic k scan.
pub const AUTO_K_MAX: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("bad k: {k} clusters requested for {n} points")]
    BadK { k: usize, n: usize },
    #[error("bad dimension: expected {expected}, got {found}")]
    BadDimension { expected: usize, found: usize },
    #[error("non-finite point coordinate")]
    NonFiniteValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "values", rename_all = "snake_case")]
pub enum Centroids {
    Continuous(Vec<Vec<f64>>),
    /// One vocabulary index per cluster.
    Discrete(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub space_id: String,
    pub centroids: Centroids,
    pub member_counts: Vec<usize>,
    /// Largest member-to-centroid distance per cluster at fit time.
    pub radii: Vec<f64>,
    pub inertia: f64,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.member_counts.len()
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.centroids, Centroids::Discrete(_))
    }

    pub fn dim(&self) -> Option<usize> {
        match &self.centroids {
            Centroids::Continuous(c) => c.first().map(Vec::len),
            Centroids::Discrete(_) => None,
        }
    }

    /// Distances from `point` to every centroid (continuous clusterings).
    pub fn distances(&self, point: &[f64]) -> Result<Vec<f64>, AggregationError> {
        match &self.centroids {
            Centroids::Continuous(cs) => {
                if let Some(c) = cs.first() {
                    if c.len() != point.len() {
                        return Err(AggregationError::BadDimension { expected: c.len(), found: point.len() });
                    }
                }
                Ok(cs.iter().map(|c| euclidean(c, point)).collect())
            }
            Centroids::Discrete(_) => Err(AggregationError::BadDimension { expected: 0, found: point.len() }),
        }
    }

    /// Cluster holding vocabulary index `token` (discrete clusterings).
    pub fn cluster_of_token(&self, token: usize) -> Option<usize> {
        match &self.centroids {
            Centroids::Discrete(ts) => ts.iter().position(|&t| t == token),
            Centroids::Continuous(_) => None,
        }
    }

    /// Nearest centroid under an ε threshold; exact ties go to the lowest id.
    pub fn assign(&self, point: &[f64], eps: f64) -> Result<Assignment, AggregationError> {
        self.assign_with(point, &EpsilonPolicy::Global(eps))
    }

    pub fn assign_with(&self, point: &[f64], policy: &EpsilonPolicy) -> Result<Assignment, AggregationError> {
        let dists = self.distances(point)?;
        let Some(nearest) = argmin(&dists) else {
            return Ok(Assignment { nearest: None, distance: f64::INFINITY, outlier: true });
        };
        let distance = dists[nearest];
        let eps = policy.epsilon_for(self, nearest);
        Ok(Assignment { nearest: Some(nearest), distance, outlier: distance > eps })
    }

    /// Exact-match assignment of a vocabulary index; distance is 0 on a hit
    /// and the one-hot distance √2 otherwise.
    pub fn assign_token(&self, token: Option<usize>) -> Assignment {
        match token.and_then(|t| self.cluster_of_token(t)) {
            Some(c) => Assignment { nearest: Some(c), distance: 0.0, outlier: false },
            None => Assignment { nearest: None, distance: std::f64::consts::SQRT_2, outlier: true },
        }
    }
}

/// How far a state may sit from a centroid and still count as a member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum EpsilonPolicy {
    /// ε_c = the cluster's fitted radius.
    #[default]
    PerCluster,
    Global(f64),
}

impl EpsilonPolicy {
    pub fn epsilon_for(&self, clustering: &Clustering, cluster: usize) -> f64 {
        match self {
            EpsilonPolicy::PerCluster => clustering.radii[cluster],
            EpsilonPolicy::Global(e) => *e,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Nearest cluster; `None` only when there is no candidate at all.
    pub nearest: Option<usize>,
    pub distance: f64,
    pub outlier: bool,
}

impl Assignment {
    pub fn cluster_id(&self) -> Option<usize> {
        if self.outlier {
            None
        } else {
            self.nearest
        }
    }
}

pub fn assign(clustering: &Clustering, state: &[f64], eps: f64) -> Result<Assignment, AggregationError> {
    clustering.assign(state, eps)
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn argmin(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| x < xs[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iterations: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { restarts: DEFAULT_RESTARTS, max_iterations: MAX_LLOYD_ITERATIONS }
    }
}

/// Full result of a k-means fit, including the winning run's labels and
/// the inertia after every assignment step.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    pub restart: usize,
    pub inertia_history: Vec<f64>,
    /// Inertia histories of every restart, in restart order.
    pub all_histories: Vec<Vec<f64>>,
}

impl KMeansFit {
    pub fn into_clustering(self, space_id: impl Into<String>, points: &[Vec<f64>]) -> Clustering {
        let k = self.centroids.len();
        let mut member_counts = vec![0; k];
        let mut radii = vec![0.0f64; k];
        for (p, &l) in points.iter().zip(&self.labels) {
            member_counts[l] += 1;
            radii[l] = radii[l].max(euclidean(p, &self.centroids[l]));
        }
        Clustering {
            space_id: space_id.into(),
            centroids: Centroids::Continuous(self.centroids),
            member_counts,
            radii,
            inertia: self.inertia,
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding, best of `restarts` runs.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering, AggregationError> {
    Ok(kmeans_fit(points, k, seed, KMeansOptions::default())?.into_clustering("", points))
}

pub fn kmeans_fit(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    opts: KMeansOptions,
) -> Result<KMeansFit, AggregationError> {
    let n = points.len();
    if k < 1 || k > n {
        return Err(AggregationError::BadK { k, n });
    }
    let d = points[0].len();
    for p in points {
        if p.len() != d {
            return Err(AggregationError::BadDimension { expected: d, found: p.len() });
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(AggregationError::NonFiniteValue);
        }
    }

    let mut best: Option<KMeansFit> = None;
    let mut histories = Vec::with_capacity(opts.restarts.max(1));
    for restart in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);
        let run = lloyd(points, kmeans_pp(points, k, &mut rng), opts.max_iterations, restart);
        histories.push(run.inertia_history.clone());
        // Strict comparison keeps the lowest restart index on exact ties.
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one restart");
    best.all_histories = histories;
    Ok(best)
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // All remaining mass is zero (duplicate points): pick uniformly.
            Err(_) => rng.random_range(0..n),
        };
        centroids.push(points[next].clone());
        let c = centroids.last().expect("just pushed");
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, c));
        }
    }
    centroids
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize, restart: usize) -> KMeansFit {
    let k = centroids.len();
    let d = points[0].len();
    let mut labels: Vec<usize> = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut costs = Vec::with_capacity(points.len());
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let (j, dist) = nearest(p, &centroids);
            if *l != j {
                *l = j;
                changed = true;
            }
            inertia += dist;
            costs.push(dist);
        }
        history.push(inertia);
        if !changed || iterations >= max_iter {
            return KMeansFit {
                centroids,
                labels,
                inertia,
                iterations,
                restart,
                inertia_history: history,
                all_histories: Vec::new(),
            };
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        // Empty clusters take the points farthest from their current centroid.
        let mut by_cost: Vec<usize> = (0..points.len()).collect();
        by_cost.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
        let mut donors = by_cost.into_iter();
        for j in 0..k {
            if counts[j] == 0 {
                if let Some(i) = donors.next() {
                    centroids[j] = points[i].clone();
                }
            } else {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
}

/// Mean silhouette of a labeling. Singletons score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += euclidean(&points[i], &points[j]);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Picks k ∈ {2..=min(10, n)} by maximal mean silhouette (ties → smaller k).
/// Fewer than two points yield a single cluster.
pub fn kmeans_auto(points: &[Vec<f64>], seed: u64, opts: KMeansOptions) -> Result<KMeansFit, AggregationError> {
    let n = points.len();
    if n < 2 {
        return kmeans_fit(points, n.max(1), seed, opts);
    }
    let mut best: Option<(f64, KMeansFit)> = None;
    for k in 2..=AUTO_K_MAX.min(n) {
        let fit = kmeans_fit(points, k, seed, opts)?;
        let s = silhouette(points, &fit.labels);
        if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
            best = Some((s, fit));
        }
    }
    Ok(best.expect("k range is non-empty").1)
}

/// Exact-match aggregation: one cluster per distinct token index, ordered
/// by index.
pub fn aggregate_discrete(space_id: impl Into<String>, tokens: &[usize]) -> Clustering {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let k = counts.len();
    Clustering {
        space_id: space_id.into(),
        centroids: Centroids::Discrete(counts.keys().copied().collect()),
        member_counts: counts.into_values().collect(),
        radii: vec![0.0; k],
        inertia: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn square() -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]]
    }

    #[test]
    fn n_equals_k() {
        let pts = vec![vec![0.0], vec![3.0], vec![7.0]];
        let c = kmeans(&pts, 3, 1).unwrap();
        assert_eq!(c.inertia, 0.0);
        assert_eq!(c.member_counts, vec![1, 1, 1]);
    }

    #[test]
    fn two_pairs() {
        // Exhaustive: {01}{23} costs 0.5+0.5 = 1.0; every other split is ≥ 50.
        let c = kmeans(&square(), 2, 42).unwrap();
        assert!((c.inertia - 1.0).abs() < 1e-12);
        let Centroids::Continuous(mut cs) = c.centroids else { panic!() };
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert_eq!(c.radii, vec![0.5, 0.5]);
    }

    #[test]
    fn bad_k() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert_eq!(kmeans(&pts, 3, 0), Err(AggregationError::BadK { k: 3, n: 2 }));
        assert_eq!(kmeans(&pts, 0, 0), Err(AggregationError::BadK { k: 0, n: 2 }));
    }

    fn fixed(centroids: Vec<Vec<f64>>) -> Clustering {
        let k = centroids.len();
        Clustering {
            space_id: "s".into(),
            centroids: Centroids::Continuous(centroids),
            member_counts: vec![1; k],
            radii: vec![0.5; k],
            inertia: 0.0,
        }
    }

    #[test]
    fn assign_cases() {
        let c = fixed(vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![5.0, 5.0]]);
        assert_eq!(c.assign(&[5.0, 5.0], 0.0).unwrap(), Assignment { nearest: Some(2), distance: 0.0, outlier: false });
        let far = fixed(vec![vec![0.0, 5.0], vec![5.0, 0.0]]);
        assert!(far.assign(&[0.0, 0.0], 1.0).unwrap().outlier);
        let tie = c.assign(&[1.0, 0.0], 2.0).unwrap();
        assert_eq!(tie.cluster_id(), Some(0));
        assert_eq!(tie.distance, 1.0);
        assert!(matches!(c.assign(&[1.0], 1.0), Err(AggregationError::BadDimension { .. })));
        // Per-cluster radius 0.5.
        assert!(c.assign_with(&[0.6, 0.0], &EpsilonPolicy::PerCluster).unwrap().outlier);
        assert!(!c.assign_with(&[0.4, 0.0], &EpsilonPolicy::PerCluster).unwrap().outlier);
    }

    #[test]
    fn discrete_aggregation() {
        let c = aggregate_discrete("calls", &[0, 1, 0]);
        assert_eq!(c.k(), 2);
        assert_eq!(c.member_counts, vec![2, 1]);
        assert_eq!(c.radii, vec![0.0, 0.0]);
        assert_eq!(aggregate_discrete("calls", &[]).k(), 0);
        assert_eq!(aggregate_discrete("calls", &[4, 3, 2, 1, 0]).member_counts, vec![1; 5]);
        assert_eq!(c.assign_token(Some(1)).cluster_id(), Some(1));
        assert!(c.assign_token(Some(7)).outlier);
        assert!(c.assign_token(None).outlier);
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Seeds both centroids on the same duplicate point; the second must
        // be moved onto the farthest point.
        let pts = vec![vec![0.0], vec![0.0], vec![10.0]];
        let run = lloyd(&pts, vec![vec![0.0], vec![0.0]], 300, 0);
        assert_eq!(run.inertia, 0.0);
        assert_eq!(run.labels, vec![0, 0, 1]);
    }

    #[test]
    fn silhouette_basic() {
        let labels = vec![0, 0, 1, 1];
        let s = silhouette(&square(), &labels);
        assert!(s > 0.9);
        assert_eq!(silhouette(&square(), &[0, 0, 0, 0]), 0.0);
    }

    #[test]
    fn auto_k_finds_three_blobs() {
        let mut pts = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (20.0, 0.0), (0.0, 20.0)] {
            for i in 0..5 {
                pts.push(vec![cx + 0.1 * i as f64, cy - 0.05 * i as f64]);
            }
        }
        let fit = kmeans_auto(&pts, 7, KMeansOptions::default()).unwrap();
        assert_eq!(fit.centroids.len(), 3);
    }

    proptest! {
        #[test]
        fn inertia_never_increases(seed in 0u64..500, n in 2usize..40, k in 1usize..6) {
            prop_assume!(k <= n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
            let fit = kmeans_fit(&pts, k, seed, KMeansOptions::default()).unwrap();
            for h in &fit.all_histories {
                prop_assert!(h.windows(2).all(|w| w[1] <= w[0]), "{h:?}");
            }
            // every point's nearest centroid is its own
            for (p, &l) in pts.iter().zip(&fit.labels) {
                prop_assert_eq!(nearest(p, &fit.centroids).0, l);
            }
        }

        #[test]
        fn same_seed_same_result(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.random_range(-3.0..3.0)]).collect();
            prop_assert_eq!(kmeans(&pts, 3, seed).unwrap(), kmeans(&pts, 3, seed).unwrap());
        }

        #[test]
        fn infinite_epsilon_never_outlier(x in -100.0f64..100.0, y in -100.0f64..100.0) {
            let c = fixed(vec![vec![0.0, 0.0], vec![3.0, 4.0]]);
            prop_assert!(!c.assign(&[x, y], f64::INFINITY).unwrap().outlier);
        }
    }
}
