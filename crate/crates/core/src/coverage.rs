//! ε-coverage and Gaussian soft coverage of semantic clusters.
//!
//! Coverage targets are the clusters of semantic-role spaces. Control-role
//! clusters are reported separately and never enter the semantic ratio.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{Centroids, EpsilonPolicy};
use crate::embedding::StatePoint;
use crate::model::{LatentModel, ModelError, SpaceModel};
use crate::trace::{Execution, SpaceRole};

#[derive(Debug, Error, PartialEq)]
pub enum CoverageError {
    #[error("model has no semantic clusters")]
    EmptyModel,
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceCoverage {
    pub space_id: String,
    pub total: usize,
    pub covered: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlCoverage {
    pub total_clusters: usize,
    pub covered_clusters: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub spaces: Vec<SpaceCoverage>,
    pub total_clusters: usize,
    pub covered_clusters: usize,
    pub ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlCoverage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SoftAggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceSoftCoverage {
    pub space_id: String,
    /// One weight in [0, 1] per cluster.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftCoverageReport {
    pub sigma: f64,
    pub aggregation: SoftAggregation,
    pub spaces: Vec<SpaceSoftCoverage>,
    pub total_clusters: usize,
    /// Mean of all per-cluster weights.
    pub soft_ratio: f64,
}

/// Distance from an embedded state to each centroid of its space. Discrete
/// spaces use one-hot geometry: 0 on a token match, √2 otherwise.
fn centroid_distances(space: &SpaceModel, point: &StatePoint) -> Result<Vec<f64>, ModelError> {
    match (&space.clustering.centroids, point) {
        (Centroids::Continuous(_), StatePoint::Vector(v)) => space
            .clustering
            .distances(v)
            .map_err(|source| ModelError::Aggregation { space_id: space.space_id().to_owned(), source }),
        (Centroids::Discrete(ts), StatePoint::Token(t)) => {
            Ok(ts.iter().map(|c| if c == t { 0.0 } else { std::f64::consts::SQRT_2 }).collect())
        }
        (Centroids::Discrete(ts), _) => Ok(vec![std::f64::consts::SQRT_2; ts.len()]),
        (Centroids::Continuous(_), _) => Err(ModelError::UnfittedSpace(space.space_id().to_owned())),
    }
}

/// Embeds every event, returning per-space lists of centroid distances.
fn distances_by_space<'m>(
    model: &'m LatentModel,
    executions: &[Execution],
) -> Result<BTreeMap<&'m str, Vec<Vec<f64>>>, ModelError> {
    let mut out: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for ev in executions.iter().flat_map(|e| &e.events) {
        let space = model.space(&ev.space_id).map_err(|e| ModelError::AtEvent {
            exec_id: ev.exec_id.clone(),
            step: ev.step,
            source: Box::new(e),
        })?;
        let point = space.embed(ev.step, &ev.payload).map_err(|e| ModelError::AtEvent {
            exec_id: ev.exec_id.clone(),
            step: ev.step,
            source: Box::new(e),
        })?;
        out.entry(space.space_id()).or_default().push(centroid_distances(space, &point)?);
    }
    Ok(out)
}

/// Cluster c is covered iff some state of its space lies within ε_c of the
/// centroid (exact token match for discrete spaces). `eps` overrides every
/// space's default policy.
pub fn epsilon_coverage(
    model: &LatentModel,
    executions: &[Execution],
    eps: Option<&EpsilonPolicy>,
) -> Result<CoverageReport, CoverageError> {
    let dists = distances_by_space(model, executions)?;
    let mut spaces = Vec::new();
    let (mut total, mut covered) = (0, 0);
    let (mut ctl_total, mut ctl_covered, mut has_control) = (0, 0, false);

    for space in model.spaces.values() {
        let k = space.clustering.k();
        let policy = eps.copied().unwrap_or_else(|| space.default_epsilon());
        let mut set = BTreeSet::new();
        for row in dists.get(space.space_id()).into_iter().flatten() {
            for (c, &d) in row.iter().enumerate() {
                let hit = if space.clustering.is_discrete() {
                    d == 0.0
                } else {
                    d <= policy.epsilon_for(&space.clustering, c)
                };
                if hit {
                    set.insert(c);
                }
            }
        }
        match space.role() {
            SpaceRole::Semantic => {
                total += k;
                covered += set.len();
                spaces.push(SpaceCoverage { space_id: space.space_id().to_owned(), total: k, covered: set });
            }
            SpaceRole::Control => {
                has_control = true;
                ctl_total += k;
                ctl_covered += set.len();
            }
        }
    }
    if total == 0 {
        return Err(CoverageError::EmptyModel);
    }
    let control = has_control.then(|| ControlCoverage {
        total_clusters: ctl_total,
        covered_clusters: ctl_covered,
        ratio: if ctl_total == 0 { 0.0 } else { ctl_covered as f64 / ctl_total as f64 },
    });
    Ok(CoverageReport {
        spaces,
        total_clusters: total,
        covered_clusters: covered,
        ratio: covered as f64 / total as f64,
        control,
    })
}

/// Per-cluster weight = aggregation over states of exp(−d²/(2σ²)).
pub fn soft_coverage(
    model: &LatentModel,
    executions: &[Execution],
    sigma: f64,
    aggregation: SoftAggregation,
) -> Result<SoftCoverageReport, CoverageError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CoverageError::BadSigma(sigma));
    }
    let dists = distances_by_space(model, executions)?;
    let mut spaces = Vec::new();
    let mut all = Vec::new();
    for space in model.spaces.values().filter(|s| s.role() == SpaceRole::Semantic) {
        let k = space.clustering.k();
        let rows = dists.get(space.space_id()).map(Vec::as_slice).unwrap_or_default();
        let weights: Vec<f64> = (0..k)
            .map(|c| {
                let ws = rows.iter().map(|r| (-(r[c] * r[c]) / (2.0 * sigma * sigma)).exp());
                match aggregation {
                    SoftAggregation::Max => ws.fold(0.0, f64::max),
                    SoftAggregation::Mean if rows.is_empty() => 0.0,
                    SoftAggregation::Mean => ws.sum::<f64>() / rows.len() as f64,
                }
            })
            .collect();
        all.extend_from_slice(&weights);
        spaces.push(SpaceSoftCoverage { space_id: space.space_id().to_owned(), weights });
    }
    if all.is_empty() {
        return Err(CoverageError::EmptyModel);
    }
    Ok(SoftCoverageReport {
        sigma,
        aggregation,
        spaces,
        total_clusters: all.len(),
        soft_ratio: all.iter().sum::<f64>() / all.len() as f64,
    })
}
