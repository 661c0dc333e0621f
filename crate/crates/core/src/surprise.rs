//! Surprise adequacy of semantic states and whole executions.
//!
//! DSA = a / b, where a is the distance from the state to its nearest
//! same-label reference x_a and b the distance from x_a to the nearest
//! reference of any other label. LSA = −log of the Gaussian KDE density
//! of the state under the same-label references.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{euclidean, EpsilonPolicy};
use crate::embedding::StatePoint;
use crate::model::{LatentModel, ModelError};
use crate::trace::Execution;

#[derive(Debug, Error, PartialEq)]
pub enum SurpriseError {
    #[error("reference set has no state labeled differently from {0}")]
    SingleClassReference(usize),
    #[error("no reference state carries label {0}")]
    UnknownLabel(usize),
    #[error("nearest same-label reference coincides with another label's reference")]
    ZeroDenominator,
    #[error("need at least 2 same-label references, found {0}")]
    TooFewReferences(usize),
    #[error("bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
    #[error("state dimension {found} does not match reference dimension {expected}")]
    BadDimension { expected: usize, found: usize },
    #[error("execution '{0}' has no state in a fitted continuous space")]
    NoScorableSteps(String),
    #[error("space '{0}' has no reference states")]
    NoReference(String),
    #[error("execution '{exec_id}' has no ground-truth class label")]
    MissingClassLabel { exec_id: String },
    #[error("class '{0}' does not occur in the reference states")]
    UnknownClass(String),
    #[error("execution '{exec_id}' step {step}: {source}")]
    AtStep {
        exec_id: String,
        step: u64,
        #[source]
        source: Box<SurpriseError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Labeled reference states of one space.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
    by_label: HashMap<usize, Vec<usize>>,
}

impl ReferenceSet {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        assert_eq!(points.len(), labels.len(), "one label per reference point");
        let mut by_label: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        Self { points, labels, by_label }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(Vec::len)
    }

    fn members(&self, label: usize) -> &[usize] {
        self.by_label.get(&label).map(Vec::as_slice).unwrap_or_default()
    }

    fn check_dim(&self, state: &[f64]) -> Result<(), SurpriseError> {
        match self.dim() {
            Some(d) if d != state.len() => Err(SurpriseError::BadDimension { expected: d, found: state.len() }),
            _ => Ok(()),
        }
    }

    /// Scott's rule for an isotropic kernel: σ̂ · m^(−1/(q+4)), with σ̂ the
    /// root mean per-axis sample standard deviation (divisor m−1).
    pub fn scott_bandwidth(&self, label: usize) -> Result<f64, SurpriseError> {
        let idx = self.members(label);
        let m = idx.len();
        if m < 2 {
            return Err(SurpriseError::TooFewReferences(m));
        }
        let q = self.dim().unwrap_or(0);
        let mut var_sum = 0.0;
        for j in 0..q {
            let mean = idx.iter().map(|&i| self.points[i][j]).sum::<f64>() / m as f64;
            var_sum += idx.iter().map(|&i| (self.points[i][j] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        }
        let sigma = (var_sum / q.max(1) as f64).sqrt();
        Ok(sigma * (m as f64).powf(-1.0 / (q as f64 + 4.0)))
    }

    pub fn dsa(&self, state: &[f64], label: usize) -> Result<f64, SurpriseError> {
        self.check_dim(state)?;
        let same = self.members(label);
        if same.is_empty() {
            return Err(SurpriseError::UnknownLabel(label));
        }
        if same.len() == self.len() {
            return Err(SurpriseError::SingleClassReference(label));
        }
        let (mut xa, mut a) = (same[0], f64::INFINITY);
        for &i in same {
            let d = euclidean(state, &self.points[i]);
            if d < a {
                a = d;
                xa = i;
            }
        }
        let b = self
            .labels
            .iter()
            .zip(&self.points)
            .filter(|(&l, _)| l != label)
            .map(|(_, p)| euclidean(&self.points[xa], p))
            .fold(f64::INFINITY, f64::min);
        if b == 0.0 {
            return Err(SurpriseError::ZeroDenominator);
        }
        Ok(a / b)
    }

    /// `bandwidth = None` uses Scott's rule over the same-label references.
    pub fn lsa(&self, state: &[f64], label: usize, bandwidth: Option<f64>) -> Result<f64, SurpriseError> {
        self.check_dim(state)?;
        let idx = self.members(label);
        if idx.len() < 2 {
            return Err(SurpriseError::TooFewReferences(idx.len()));
        }
        let h = match bandwidth {
            Some(h) => h,
            None => self.scott_bandwidth(label)?,
        };
        if !(h > 0.0 && h.is_finite()) {
            return Err(SurpriseError::BadBandwidth(h));
        }
        let q = state.len() as f64;
        let m = idx.len() as f64;
        // log-sum-exp of the kernel exponents keeps far states finite.
        let exps: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let d = euclidean(state, &self.points[i]);
                -(d * d) / (2.0 * h * h)
            })
            .collect();
        let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + exps.iter().map(|e| (e - top).exp()).sum::<f64>().ln();
        let log_density = lse - m.ln() - 0.5 * q * (2.0 * std::f64::consts::PI * h * h).ln();
        Ok(-log_density)
    }
}

pub fn dsa(refs: &ReferenceSet, state: &[f64], label: usize) -> Result<f64, SurpriseError> {
    refs.dsa(state, label)
}

pub fn lsa(refs: &ReferenceSet, state: &[f64], label: usize, bandwidth: Option<f64>) -> Result<f64, SurpriseError> {
    refs.lsa(state, label, bandwidth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SurpriseMethod {
    #[default]
    Dsa,
    Lsa,
}

impl SurpriseMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SurpriseMethod::Dsa => "dsa",
            SurpriseMethod::Lsa => "lsa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreAggregation {
    #[default]
    Max,
    Mean,
}

impl ScoreAggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreAggregation::Max => "max",
            ScoreAggregation::Mean => "mean",
        }
    }

    pub fn apply(self, scores: &[f64]) -> f64 {
        match self {
            ScoreAggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ScoreAggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Fitted cluster of each state.
    #[default]
    Cluster,
    /// The `"class"` header field of each execution.
    Class,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurpriseOptions {
    pub method: SurpriseMethod,
    pub aggregation: ScoreAggregation,
    pub labels: LabelSource,
    pub bandwidth: Option<f64>,
    pub epsilon: Option<EpsilonPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub step: u64,
    pub space_id: String,
    pub label: usize,
    pub score: f64,
    /// The state fell outside every cluster; its nearest cluster was used.
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurpriseScore {
    pub exec_id: String,
    pub method: SurpriseMethod,
    pub aggregation: ScoreAggregation,
    pub steps: Vec<StepScore>,
    pub score: f64,
}

impl SurpriseScore {
    pub fn flagged_outlier_steps(&self) -> Vec<u64> {
        self.steps.iter().filter(|s| s.outlier).map(|s| s.step).collect()
    }
}

/// Reference sets for every continuous space of a model, built once and
/// reused across executions.
pub struct SurpriseScorer<'m> {
    model: &'m LatentModel,
    opts: SurpriseOptions,
    refs: HashMap<String, (ReferenceSet, Vec<String>)>,
}

impl<'m> SurpriseScorer<'m> {
    pub fn new(model: &'m LatentModel, opts: SurpriseOptions) -> Result<Self, SurpriseError> {
        let mut refs = HashMap::new();
        for (id, space) in &model.spaces {
            let Some(r) = &space.reference else { continue };
            let (labels, classes) = match opts.labels {
                LabelSource::Cluster => (r.cluster_labels.clone(), Vec::new()),
                LabelSource::Class => {
                    let Some(cls) = &r.class_labels else {
                        return Err(SurpriseError::MissingClassLabel { exec_id: format!("<reference:{id}>") });
                    };
                    let mut names: Vec<String> = cls.clone();
                    names.sort();
                    names.dedup();
                    let labels = cls.iter().map(|c| names.binary_search(c).expect("name present")).collect();
                    (labels, names)
                }
            };
            refs.insert(id.clone(), (ReferenceSet::new(r.points.clone(), labels), classes));
        }
        Ok(Self { model, opts, refs })
    }

    pub fn score(&self, exec: &Execution) -> Result<SurpriseScore, SurpriseError> {
        let mut steps = Vec::new();
        for ev in &exec.events {
            let at = |source: SurpriseError| SurpriseError::AtStep {
                exec_id: exec.exec_id.clone(),
                step: ev.step,
                source: Box::new(source),
            };
            let (space, placement) = self.model.place_event(ev, self.opts.epsilon.as_ref())?;
            let StatePoint::Vector(point) = &placement.point else { continue };
            let (refs, classes) = self
                .refs
                .get(space.space_id())
                .ok_or_else(|| at(SurpriseError::NoReference(space.space_id().into())))?;
            let label = match self.opts.labels {
                LabelSource::Cluster => placement.assignment.nearest.expect("continuous spaces have clusters"),
                LabelSource::Class => {
                    let class = exec
                        .class_label()
                        .ok_or_else(|| SurpriseError::MissingClassLabel { exec_id: exec.exec_id.clone() })?;
                    classes.binary_search(&class).map_err(|_| at(SurpriseError::UnknownClass(class)))?
                }
            };
            let score = match self.opts.method {
                SurpriseMethod::Dsa => refs.dsa(point, label),
                SurpriseMethod::Lsa => refs.lsa(point, label, self.opts.bandwidth),
            }
            .map_err(at)?;
            steps.push(StepScore {
                step: ev.step,
                space_id: space.space_id().to_owned(),
                label,
                score,
                outlier: placement.assignment.outlier,
            });
        }
        if steps.is_empty() {
            return Err(SurpriseError::NoScorableSteps(exec.exec_id.clone()));
        }
        let scores: Vec<f64> = steps.iter().map(|s| s.score).collect();
        Ok(SurpriseScore {
            exec_id: exec.exec_id.clone(),
            method: self.opts.method,
            aggregation: self.opts.aggregation,
            score: self.opts.aggregation.apply(&scores),
            steps,
        })
    }
}

pub fn execution_surprise(
    model: &LatentModel,
    exec: &Execution,
    opts: SurpriseOptions,
) -> Result<SurpriseScore, SurpriseError> {
    SurpriseScorer::new(model, opts)?.score(exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fit_model;
    use crate::trace::{Outcome, SpaceConfig};

    #[test]
    fn dsa_zero_on_reference() {
        let r = ReferenceSet::new(vec![vec![0.0], vec![5.0]], vec![0, 1]);
        assert_eq!(r.dsa(&[0.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn dsa_half() {
        // Same-label point at distance 1; its nearest other-label point is 2 away.
        let r = ReferenceSet::new(vec![vec![1.0, 0.0], vec![3.0, 0.0], vec![-4.0, 0.0]], vec![0, 1, 0]);
        assert!((r.dsa(&[0.0, 0.0], 0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dsa_errors() {
        let one = ReferenceSet::new(vec![vec![0.0], vec![1.0]], vec![0, 0]);
        assert_eq!(one.dsa(&[0.0], 0), Err(SurpriseError::SingleClassReference(0)));
        let overlap = ReferenceSet::new(vec![vec![0.0], vec![0.0]], vec![0, 1]);
        assert_eq!(overlap.dsa(&[0.5], 0), Err(SurpriseError::ZeroDenominator));
        assert_eq!(overlap.dsa(&[0.5], 7), Err(SurpriseError::UnknownLabel(7)));
        assert!(matches!(overlap.dsa(&[0.5, 1.0], 0), Err(SurpriseError::BadDimension { .. })));
    }

    #[test]
    fn lsa_hand_value() {
        let r = ReferenceSet::new(vec![vec![0.0], vec![0.0]], vec![0, 0]);
        let want = -(1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((r.lsa(&[0.0], 0, Some(1.0)).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.9189).abs() < 1e-4);
    }

    #[test]
    fn lsa_errors() {
        let r = ReferenceSet::new(vec![vec![0.0], vec![0.0], vec![3.0]], vec![0, 0, 1]);
        assert_eq!(r.lsa(&[0.0], 1, None), Err(SurpriseError::TooFewReferences(1)));
        assert_eq!(r.lsa(&[0.0], 0, Some(0.0)), Err(SurpriseError::BadBandwidth(0.0)));
        // Identical references give Scott bandwidth 0.
        assert_eq!(r.lsa(&[0.0], 0, None), Err(SurpriseError::BadBandwidth(0.0)));
    }

    #[test]
    fn lsa_increases_along_ray() {
        let r = ReferenceSet::new(vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.5, 0.2]], vec![0, 0, 0]);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..60 {
            let t = 2.0 + i as f64;
            let s = r.lsa(&[t, 0.5 * t], 0, None).unwrap();
            assert!(s > prev);
            assert!(s.is_finite());
            prev = s;
        }
    }

    #[test]
    fn scott_rule() {
        let r = ReferenceSet::new(vec![vec![0.0], vec![2.0]], vec![0, 0]);
        // σ̂ = √2, m = 2, q = 1: h = √2 · 2^(−1/5)
        let want = 2f64.sqrt() * 2f64.powf(-0.2);
        assert!((r.scott_bandwidth(0).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn aggregation_rules() {
        assert_eq!(ScoreAggregation::Max.apply(&[0.1, 0.7, 0.3]), 0.7);
        assert!((ScoreAggregation::Mean.apply(&[0.1, 0.7, 0.3]) - 11.0 / 30.0).abs() < 1e-15);
    }

    fn blobs() -> Vec<Execution> {
        let mut out = Vec::new();
        for (i, (x, class)) in
            [(0.0, "a"), (0.5, "a"), (1.0, "a"), (10.0, "b"), (10.5, "b"), (11.0, "b")].into_iter().enumerate()
        {
            let mut e = Execution::new(format!("r{i}"), Outcome::Pass);
            e.meta.insert("class".into(), class.into());
            e.push_token("calls", "go").push_vector("fc", vec![x, 0.0]);
            out.push(e);
        }
        out
    }

    #[test]
    fn execution_on_references_is_zero() {
        let refs = blobs();
        let cfgs = [SpaceConfig::continuous("fc").with_k(2), SpaceConfig::discrete("calls")];
        let model = fit_model(&refs, &cfgs, 3).unwrap();
        for e in &refs {
            let s = execution_surprise(&model, e, SurpriseOptions::default()).unwrap();
            assert_eq!(s.score, 0.0);
            assert_eq!(s.steps.len(), 1);
            let c = execution_surprise(&model, e, SurpriseOptions { labels: LabelSource::Class, ..Default::default() })
                .unwrap();
            assert_eq!(c.score, 0.0);
        }
    }

    #[test]
    fn outlier_steps_are_flagged() {
        let refs = blobs();
        let model = fit_model(&refs, &[SpaceConfig::continuous("fc").with_k(2)], 3).unwrap();
        let mut q = Execution::new("q", Outcome::Unknown);
        q.push_vector("fc", vec![4.0, 3.0]).push_vector("fc", vec![0.5, 0.0]);
        let lsa = SurpriseOptions { method: SurpriseMethod::Lsa, ..Default::default() };
        let s = execution_surprise(&model, &q, lsa).unwrap();
        assert_eq!(s.flagged_outlier_steps(), vec![0]);
        assert!(s.steps[0].score > s.steps[1].score);
        let mean =
            execution_surprise(&model, &q, SurpriseOptions { aggregation: ScoreAggregation::Mean, ..lsa }).unwrap();
        assert!(mean.score <= s.score);
    }

    #[test]
    fn token_only_execution() {
        let refs = blobs();
        let cfgs = [SpaceConfig::continuous("fc").with_k(2), SpaceConfig::discrete("calls")];
        let model = fit_model(&refs, &cfgs, 3).unwrap();
        let mut q = Execution::new("q", Outcome::Unknown);
        q.push_token("calls", "go");
        assert_eq!(
            execution_surprise(&model, &q, SurpriseOptions::default()),
            Err(SurpriseError::NoScorableSteps("q".into()))
        );
    }
}
