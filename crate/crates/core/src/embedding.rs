//! Latent mapping: raw execution data to semantic states.
//!
//! Continuous spaces are embedded either as-is or through a PCA projection
//! fitted on the reference vectors; discrete spaces index tokens into an
//! append-only vocabulary (one-hot geometry, stored as indices).

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::trace::Payload;

/// Above this dimension the covariance is never formed; components come
/// from power iteration on the centered data instead.
pub const DENSE_EIGEN_MAX_DIM: usize = 512;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("bad dimension: {0}")]
    BadDimension(String),
    #[error("degenerate data: total variance is zero")]
    DegenerateData,
    #[error("non-finite input value")]
    NonFiniteValue,
    #[error("{found} event cannot be embedded in a {expected} space")]
    KindMismatch { expected: &'static str, found: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// q rows of length d, pairwise orthonormal.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
}

impl Projection {
    /// Zero-mean, axis-aligned projection of full rank.
    pub fn identity(d: usize) -> Self {
        let components = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self { mean: vec![0.0; d], components, explained_variance_ratio: vec![1.0 / d as f64; d] }
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    /// `components · (v − mean)`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
        if v.len() != self.input_dim() {
            return Err(EmbeddingError::BadDimension(format!(
                "vector has length {}, projection expects {}",
                v.len(),
                self.input_dim()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFiniteValue);
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(v).zip(&self.mean).map(|((ci, vi), mi)| ci * (vi - mi)).sum())
            .collect())
    }
}

pub fn apply_projection(proj: &Projection, v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    proj.apply(v)
}

/// Fits a q-component PCA on the rows of `points` (sample covariance,
/// divisor n−1). Components are ordered by descending eigenvalue, each
/// oriented so its largest-magnitude entry is positive; equal eigenvalues
/// are ordered by the axis of that entry.
pub fn fit_projection(points: &[Vec<f64>], q: usize) -> Result<Projection, EmbeddingError> {
    let n = points.len();
    if n < 2 {
        return Err(EmbeddingError::BadDimension(format!("need at least 2 points, got {n}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(EmbeddingError::BadDimension("rows have differing lengths".into()));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFiniteValue);
    }
    if q < 1 || q > (n - 1).min(d) {
        return Err(EmbeddingError::BadDimension(format!("target dimension {q} outside [1, {}]", (n - 1).min(d))));
    }

    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);

    let total_var = centered.iter().map(|x| x * x).sum::<f64>() / (n - 1) as f64;
    if total_var <= 0.0 {
        return Err(EmbeddingError::DegenerateData);
    }

    let mut pairs = if d <= DENSE_EIGEN_MAX_DIM { dense_eigenpairs(&centered) } else { power_eigenpairs(&centered, q) };
    for (_, v) in pairs.iter_mut() {
        orient(v);
    }
    order_pairs(&mut pairs, total_var);
    pairs.truncate(q);

    let explained_variance_ratio = pairs.iter().map(|(l, _)| l.max(0.0) / total_var).collect();
    let components = pairs.into_iter().map(|(_, v)| v).collect();
    Ok(Projection { mean, components, explained_variance_ratio })
}

fn dense_eigenpairs(centered: &DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let n = centered.nrows();
    let cov = (centered.transpose() * centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    eig.eigenvalues.iter().zip(eig.eigenvectors.column_iter()).map(|(&l, v)| (l, v.iter().copied().collect())).collect()
}

/// Top-q eigenpairs of `XᵀX/(n−1)` by power iteration with deflation.
/// Starts from the normalized all-ones vector (re-orthogonalized against
/// earlier components, falling back to basis vectors if that vanishes).
fn power_eigenpairs(centered: &DMatrix<f64>, q: usize) -> Vec<(f64, Vec<f64>)> {
    let (n, d) = centered.shape();
    let cov_mul = |v: &nalgebra::DVector<f64>| centered.transpose() * (centered * v) / (n - 1) as f64;
    let mut found: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(q);
    let mut out = Vec::with_capacity(q);

    let deflate = |v: &mut nalgebra::DVector<f64>, found: &[nalgebra::DVector<f64>]| {
        for u in found {
            let proj = u.dot(v);
            v.axpy(-proj, u, 1.0);
        }
    };

    for _ in 0..q {
        let mut v = nalgebra::DVector::from_element(d, 1.0);
        deflate(&mut v, &found);
        let mut axis = 0;
        while v.norm() < 1e-8 && axis < d {
            v = nalgebra::DVector::from_fn(d, |i, _| if i == axis { 1.0 } else { 0.0 });
            deflate(&mut v, &found);
            axis += 1;
        }
        v /= v.norm();

        for _ in 0..POWER_MAX_ITER {
            let mut w = cov_mul(&v);
            deflate(&mut w, &found);
            let norm = w.norm();
            if norm == 0.0 {
                break;
            }
            w /= norm;
            let delta = (&w - &v).norm().min((&w + &v).norm());
            v = w;
            if delta < POWER_TOL {
                break;
            }
        }
        let lambda = v.dot(&cov_mul(&v));
        out.push((lambda, v.iter().copied().collect()));
        found.push(v);
    }
    out
}

fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

fn orient(v: &mut [f64]) {
    if v[argmax_abs(v)] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn order_pairs(pairs: &mut [(f64, Vec<f64>)], scale: f64) {
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && (pairs[start].0 - pairs[end].0).abs() <= tol {
            end += 1;
        }
        pairs[start..end].sort_by_key(|(_, v)| argmax_abs(v));
        start = end;
    }
}

/// Append-only token index in first-appearance order.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Index of `token`, assigning the next free index on first sight.
    pub fn encode(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), i);
        i
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl FromIterator<String> for Vocabulary {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        let mut v = Vocabulary::new();
        for t in iter {
            v.encode(&t);
        }
        v
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        let vocab: Vocabulary = tokens.iter().cloned().collect();
        if vocab.len() != tokens.len() {
            return Err(serde::de::Error::custom("vocabulary contains duplicate tokens"));
        }
        Ok(vocab)
    }
}

pub fn encode_token(vocab: &mut Vocabulary, token: &str) -> usize {
    vocab.encode(token)
}

/// A semantic state's coordinates in its latent space.
#[derive(Debug, Clone, PartialEq)]
pub enum StatePoint {
    Vector(Vec<f64>),
    Token(usize),
    /// Token absent from the fitted vocabulary.
    UnseenToken,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticState {
    pub exec_id: String,
    pub step: u64,
    pub space_id: String,
    pub point: StatePoint,
}

/// Maps execution data at a step into a semantic state. The step index is
/// passed through so embedders may vary along an execution.
pub trait Embed {
    fn embed(&self, step: u64, data: &Payload) -> Result<StatePoint, EmbeddingError>;
}

/// The embedders this crate can fit and persist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SpaceEmbedder {
    Identity { dim: usize },
    Pca { projection: Projection },
    Vocab { vocabulary: Vocabulary },
}

impl SpaceEmbedder {
    /// Dimension of embedded vectors; `None` for discrete spaces.
    pub fn output_dim(&self) -> Option<usize> {
        match self {
            SpaceEmbedder::Identity { dim } => Some(*dim),
            SpaceEmbedder::Pca { projection } => Some(projection.output_dim()),
            SpaceEmbedder::Vocab { .. } => None,
        }
    }

    pub fn embed_vector(&self, v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
        match self {
            SpaceEmbedder::Identity { dim } => {
                if v.len() != *dim {
                    return Err(EmbeddingError::BadDimension(format!(
                        "vector has length {}, space expects {dim}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(EmbeddingError::NonFiniteValue);
                }
                Ok(v.to_vec())
            }
            SpaceEmbedder::Pca { projection } => projection.apply(v),
            SpaceEmbedder::Vocab { .. } => Err(EmbeddingError::KindMismatch { expected: "discrete", found: "vector" }),
        }
    }
}

impl Embed for SpaceEmbedder {
    fn embed(&self, _step: u64, data: &Payload) -> Result<StatePoint, EmbeddingError> {
        match (self, data) {
            (SpaceEmbedder::Vocab { vocabulary }, Payload::Token(t)) => {
                Ok(vocabulary.lookup(t).map_or(StatePoint::UnseenToken, StatePoint::Token))
            }
            (SpaceEmbedder::Vocab { .. }, Payload::Vector(_)) => {
                Err(EmbeddingError::KindMismatch { expected: "discrete", found: "vector" })
            }
            (_, Payload::Vector(v)) => self.embed_vector(v).map(StatePoint::Vector),
            (_, Payload::Token(_)) => Err(EmbeddingError::KindMismatch { expected: "continuous", found: "token" }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect()
    }

    #[test]
    fn line_fit() {
        // Covariance [[1,1],[1,1]]: eigenvalues 2 and 0, top eigenvector (1,1)/√2.
        let pts = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        let p = fit_projection(&pts, 1).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.components[0][0] - h).abs() < 1e-12);
        assert!((p.components[0][1] - h).abs() < 1e-12);
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert_eq!(p.mean, vec![1.0, 1.0]);
        let y = p.apply(&[3.0, 3.0]).unwrap();
        assert!((y[0] - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(p.apply(&[1.0, 1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let pts = vec![vec![1.0, 2.0]; 3];
        assert_eq!(fit_projection(&pts, 1), Err(EmbeddingError::DegenerateData));
    }

    #[test]
    fn target_dim_range() {
        let pts = vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 0.0], vec![3.0, 1.0, 1.0]];
        assert!(matches!(fit_projection(&pts, 0), Err(EmbeddingError::BadDimension(_))));
        assert!(matches!(fit_projection(&pts, 3), Err(EmbeddingError::BadDimension(_))));
        assert!(fit_projection(&pts, 2).is_ok());
        assert!(matches!(fit_projection(&pts[..1], 1), Err(EmbeddingError::BadDimension(_))));
    }

    #[test]
    fn apply_checks_dimension() {
        let p = Projection::identity(3);
        assert!(matches!(p.apply(&[1.0]), Err(EmbeddingError::BadDimension(_))));
        assert_eq!(p.apply(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn full_rank_is_orthonormal_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 12, 4);
        let p = fit_projection(&pts, 4).unwrap();
        for (i, a) in p.components.iter().enumerate() {
            for (j, b) in p.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8);
            }
            let m = argmax_abs(a);
            assert!(a[m] > 0.0);
        }
        assert!(p.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
        assert!(p.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-8);
        // Reconstruction: mean + Σ y_i c_i == x
        for x in &pts {
            let y = p.apply(x).unwrap();
            let mut back = p.mean.clone();
            for (yi, c) in y.iter().zip(&p.components) {
                for (b, ci) in back.iter_mut().zip(c) {
                    *b += yi * ci;
                }
            }
            assert!(dist(&back, x) < 1e-8);
        }
    }

    #[test]
    fn power_route_agrees_with_dense_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Anisotropic data so the leading eigenvalues are well separated.
        let scales = [9.0, 5.0, 2.0, 1.0, 0.5, 0.2];
        let pts: Vec<Vec<f64>> =
            (0..40).map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect()).collect();
        let centered = {
            let n = pts.len();
            let d = pts[0].len();
            let mean: Vec<f64> = (0..d).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
            DMatrix::from_fn(n, d, |i, j| pts[i][j] - mean[j])
        };
        let mut dense = dense_eigenpairs(&centered);
        let mut power = power_eigenpairs(&centered, 3);
        for (_, v) in dense.iter_mut().chain(power.iter_mut()) {
            orient(v);
        }
        order_pairs(&mut dense, 1.0);
        for ((ld, vd), (lp, vp)) in dense.iter().zip(&power) {
            assert!((ld - lp).abs() < 1e-6 * ld.abs().max(1.0), "{ld} vs {lp}");
            assert!(dist(vd, vp) < 1e-4);
        }
    }

    #[test]
    fn vocabulary_indices() {
        let mut v = Vocabulary::new();
        assert_eq!(v.encode("get_class_covered()"), 0);
        assert_eq!(v.encode("get_class_covered()"), 0);
        assert_eq!(v.encode("get_comments(x)"), 1);
        assert_eq!(v.lookup("nope"), None);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["get_class_covered()","get_comments(x)"]"#);
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","a"]"#).is_err());
    }

    #[test]
    fn embedder_kinds() {
        let vocab: Vocabulary = ["a".to_string()].into_iter().collect();
        let e = SpaceEmbedder::Vocab { vocabulary: vocab };
        assert_eq!(e.embed(0, &Payload::Token("a".into())).unwrap(), StatePoint::Token(0));
        assert_eq!(e.embed(0, &Payload::Token("b".into())).unwrap(), StatePoint::UnseenToken);
        assert!(e.embed(0, &Payload::Vector(vec![1.0])).is_err());
        let id = SpaceEmbedder::Identity { dim: 2 };
        assert!(id.embed(0, &Payload::Token("a".into())).is_err());
        assert!(id.embed(0, &Payload::Vector(vec![1.0])).is_err());
    }

    proptest! {
        #[test]
        fn full_rank_preserves_distances(seed in 0u64..1000, n in 6usize..15, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, n, d);
            let p = fit_projection(&pts, d).unwrap();
            for a in &pts {
                for b in &pts {
                    let pa = p.apply(a).unwrap();
                    let pb = p.apply(b).unwrap();
                    prop_assert!((dist(a, b) - dist(&pa, &pb)).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn projection_is_affine(seed in 0u64..1000, alpha in -2.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, 8, 5);
            let p = fit_projection(&pts, 2).unwrap();
            let (x, y) = (&pts[0], &pts[1]);
            let mix: Vec<f64> = x.iter().zip(y).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let (px, py, pm) = (p.apply(x).unwrap(), p.apply(y).unwrap(), p.apply(&mix).unwrap());
            for i in 0..2 {
                prop_assert!((pm[i] - (alpha * px[i] + (1.0 - alpha) * py[i])).abs() < 1e-8);
            }
        }

        #[test]
        fn fit_is_deterministic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, 10, 4);
            prop_assert_eq!(fit_projection(&pts, 3).unwrap(), fit_projection(&pts, 3).unwrap());
        }

        #[test]
        fn vocabulary_is_injective(tokens in prop::collection::vec("[a-c]{1,2}", 0..30)) {
            let mut v = Vocabulary::new();
            let idx: Vec<usize> = tokens.iter().map(|t| v.encode(t)).collect();
            for (i, a) in tokens.iter().enumerate() {
                for (j, b) in tokens.iter().enumerate() {
                    prop_assert_eq!(a == b, idx[i] == idx[j]);
                }
                prop_assert_eq!(v.token(idx[i]), Some(a.as_str()));
            }
        }
    }
}
