//! Per-space fitted artifacts and the persisted model file.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    aggregate_discrete, kmeans_auto, kmeans_fit, AggregationError, Assignment, Clustering, EpsilonPolicy, KMeansOptions,
};
use crate::embedding::{fit_projection, Embed, EmbeddingError, SpaceEmbedder, StatePoint, Vocabulary};
use crate::sfg::SemanticFlowGraph;
use crate::trace::{Execution, Payload, SpaceConfig, SpaceKind, SpaceRole, TraceEvent};

pub const MODEL_FORMAT: &str = "semflow-model-v1";

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("space '{0}' is not fitted")]
    UnfittedSpace(String),
    #[error("space '{0}' has no states to fit")]
    NoStates(String),
    #[error("space '{space_id}': {source}")]
    Embedding {
        space_id: String,
        #[source]
        source: EmbeddingError,
    },
    #[error("space '{space_id}': {source}")]
    Aggregation {
        space_id: String,
        #[source]
        source: AggregationError,
    },
    #[error("execution '{exec_id}' step {step}: {source}")]
    AtEvent {
        exec_id: String,
        step: u64,
        #[source]
        source: Box<ModelError>,
    },
    #[error("unsupported model format '{0}'")]
    BadFormat(String),
}

impl ModelError {
    fn at(ev: &TraceEvent, source: ModelError) -> Self {
        ModelError::AtEvent { exec_id: ev.exec_id.clone(), step: ev.step, source: Box::new(source) }
    }
}

/// Embedded reference states of a continuous space, kept for surprise
/// scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStates {
    pub points: Vec<Vec<f64>>,
    pub cluster_labels: Vec<usize>,
    /// Ground-truth classes, present only when every reference execution
    /// carries one.
    #[serde(default)]
    pub class_labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceModel {
    pub config: SpaceConfig,
    pub embedder: SpaceEmbedder,
    pub clustering: Clustering,
    #[serde(default)]
    pub reference: Option<ReferenceStates>,
}

/// Where one event landed in its space.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub point: StatePoint,
    pub assignment: Assignment,
}

impl SpaceModel {
    pub fn space_id(&self) -> &str {
        &self.config.space_id
    }

    pub fn role(&self) -> SpaceRole {
        self.config.role
    }

    /// Configured ε, or the per-cluster radius when none was given.
    pub fn default_epsilon(&self) -> EpsilonPolicy {
        self.config.epsilon.map_or(EpsilonPolicy::PerCluster, EpsilonPolicy::Global)
    }

    pub fn vocabulary(&self) -> Option<&Vocabulary> {
        match &self.embedder {
            SpaceEmbedder::Vocab { vocabulary } => Some(vocabulary),
            _ => None,
        }
    }

    pub fn embed(&self, step: u64, payload: &Payload) -> Result<StatePoint, ModelError> {
        self.embedder
            .embed(step, payload)
            .map_err(|source| ModelError::Embedding { space_id: self.space_id().to_owned(), source })
    }

    pub fn place(&self, step: u64, payload: &Payload, eps: &EpsilonPolicy) -> Result<Placement, ModelError> {
        let point = self.embed(step, payload)?;
        let assignment = match &point {
            StatePoint::Vector(v) => self
                .clustering
                .assign_with(v, eps)
                .map_err(|source| ModelError::Aggregation { space_id: self.space_id().to_owned(), source })?,
            StatePoint::Token(t) => self.clustering.assign_token(Some(*t)),
            StatePoint::UnseenToken => self.clustering.assign_token(None),
        };
        Ok(Placement { point, assignment })
    }

    /// Display name of a cluster: the token for discrete spaces,
    /// `space#id` otherwise.
    pub fn cluster_label(&self, cluster: usize) -> String {
        match (&self.embedder, &self.clustering.centroids) {
            (SpaceEmbedder::Vocab { vocabulary }, crate::aggregation::Centroids::Discrete(ts)) => ts
                .get(cluster)
                .and_then(|&t| vocabulary.token(t))
                .map_or_else(|| format!("{}#{cluster}", self.space_id()), str::to_owned),
            _ => format!("{}#{cluster}", self.space_id()),
        }
    }
}

/// All fitted spaces, keyed by space id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub seed: u64,
    pub spaces: BTreeMap<String, SpaceModel>,
}

impl LatentModel {
    pub fn space(&self, id: &str) -> Result<&SpaceModel, ModelError> {
        self.spaces.get(id).ok_or_else(|| ModelError::UnfittedSpace(id.to_owned()))
    }

    pub fn has_control_space(&self) -> bool {
        self.spaces.values().any(|s| s.role() == SpaceRole::Control)
    }

    /// Places an event of an execution, attaching exec/step context to errors.
    pub fn place_event(
        &self,
        ev: &TraceEvent,
        eps: Option<&EpsilonPolicy>,
    ) -> Result<(&SpaceModel, Placement), ModelError> {
        let space = self.space(&ev.space_id).map_err(|e| ModelError::at(ev, e))?;
        let policy = eps.copied().unwrap_or_else(|| space.default_epsilon());
        let placement = space.place(ev.step, &ev.payload, &policy).map_err(|e| ModelError::at(ev, e))?;
        Ok((space, placement))
    }
}

/// Fits every configured space on the events of `executions`.
///
/// Continuous spaces: optional PCA to `projection_dim`, then k-means with
/// the configured k (or a silhouette scan when absent). Discrete spaces:
/// vocabulary in first-appearance order, one cluster per token.
pub fn fit_model(executions: &[Execution], configs: &[SpaceConfig], seed: u64) -> Result<LatentModel, ModelError> {
    fit_model_with(executions, configs, seed, KMeansOptions::default())
}

pub fn fit_model_with(
    executions: &[Execution],
    configs: &[SpaceConfig],
    seed: u64,
    opts: KMeansOptions,
) -> Result<LatentModel, ModelError> {
    let mut spaces = BTreeMap::new();
    for cfg in configs {
        let events: Vec<(&Execution, &TraceEvent)> = executions
            .iter()
            .flat_map(|x| x.events.iter().map(move |e| (x, e)))
            .filter(|(_, e)| e.space_id == cfg.space_id)
            .collect();
        if events.is_empty() {
            return Err(ModelError::NoStates(cfg.space_id.clone()));
        }
        let model = match cfg.space_kind {
            SpaceKind::Discrete => fit_discrete(cfg, &events)?,
            SpaceKind::Continuous => fit_continuous(cfg, &events, seed, opts)?,
        };
        spaces.insert(cfg.space_id.clone(), model);
    }
    Ok(LatentModel { seed, spaces })
}

fn fit_discrete(cfg: &SpaceConfig, events: &[(&Execution, &TraceEvent)]) -> Result<SpaceModel, ModelError> {
    let mut vocabulary = Vocabulary::new();
    let mut indices = Vec::with_capacity(events.len());
    for (_, ev) in events {
        match &ev.payload {
            Payload::Token(t) => indices.push(vocabulary.encode(t)),
            Payload::Vector(_) => {
                return Err(ModelError::at(
                    ev,
                    ModelError::Embedding {
                        space_id: cfg.space_id.clone(),
                        source: EmbeddingError::KindMismatch { expected: "discrete", found: "vector" },
                    },
                ))
            }
        }
    }
    Ok(SpaceModel {
        config: cfg.clone(),
        clustering: aggregate_discrete(&cfg.space_id, &indices),
        embedder: SpaceEmbedder::Vocab { vocabulary },
        reference: None,
    })
}

fn fit_continuous(
    cfg: &SpaceConfig,
    events: &[(&Execution, &TraceEvent)],
    seed: u64,
    opts: KMeansOptions,
) -> Result<SpaceModel, ModelError> {
    let space_id = cfg.space_id.clone();
    let mut raw = Vec::with_capacity(events.len());
    for (_, ev) in events {
        match &ev.payload {
            Payload::Vector(v) => raw.push(v.clone()),
            Payload::Token(_) => {
                return Err(ModelError::at(
                    ev,
                    ModelError::Embedding {
                        space_id: space_id.clone(),
                        source: EmbeddingError::KindMismatch { expected: "continuous", found: "token" },
                    },
                ))
            }
        }
    }
    let embedder = match cfg.projection_dim {
        Some(q) => SpaceEmbedder::Pca {
            projection: fit_projection(&raw, q)
                .map_err(|source| ModelError::Embedding { space_id: space_id.clone(), source })?,
        },
        None => SpaceEmbedder::Identity { dim: raw[0].len() },
    };
    let points = raw
        .iter()
        .map(|v| embedder.embed_vector(v))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| ModelError::Embedding { space_id: space_id.clone(), source })?;

    let agg_err = |source| ModelError::Aggregation { space_id: space_id.clone(), source };
    let fit = match cfg.k {
        Some(k) => kmeans_fit(&points, k, seed, opts).map_err(agg_err)?,
        None => kmeans_auto(&points, seed, opts).map_err(agg_err)?,
    };
    let cluster_labels = fit.labels.clone();
    let clustering = fit.into_clustering(&space_id, &points);

    let class_labels: Option<Vec<String>> = events.iter().map(|(x, _)| x.class_label()).collect();
    Ok(SpaceModel {
        config: cfg.clone(),
        embedder,
        clustering,
        reference: Some(ReferenceStates { points, cluster_labels, class_labels }),
    })
}

/// On-disk model: format tag, fitted spaces and the reference SFG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub seed: u64,
    pub spaces: Vec<SpaceModel>,
    pub graph: SemanticFlowGraph,
}

impl ModelFile {
    pub fn new(model: &LatentModel, graph: SemanticFlowGraph) -> Self {
        Self {
            format: MODEL_FORMAT.to_owned(),
            seed: model.seed,
            spaces: model.spaces.values().cloned().collect(),
            graph,
        }
    }

    pub fn into_parts(self) -> Result<(LatentModel, SemanticFlowGraph), ModelError> {
        if self.format != MODEL_FORMAT {
            return Err(ModelError::BadFormat(self.format));
        }
        let spaces = self.spaces.into_iter().map(|s| (s.config.space_id.clone(), s)).collect();
        Ok((LatentModel { seed: self.seed, spaces }, self.graph))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Outcome;

    fn corpus() -> Vec<Execution> {
        let mut out = Vec::new();
        for (i, (x, t)) in [(0.0, "a"), (0.2, "a"), (10.0, "b"), (10.2, "c")].into_iter().enumerate() {
            let mut e = Execution::new(format!("e{i}"), Outcome::Pass);
            e.meta.insert("class".into(), (if x < 5.0 { "lo" } else { "hi" }).into());
            e.push_vector("fc", vec![x, x / 2.0]).push_token("calls", t);
            out.push(e);
        }
        out
    }

    #[test]
    fn fits_both_kinds() {
        let cfgs = [SpaceConfig::continuous("fc").with_k(2), SpaceConfig::discrete("calls")];
        let m = fit_model(&corpus(), &cfgs, 1).unwrap();
        let fc = m.space("fc").unwrap();
        assert_eq!(fc.clustering.k(), 2);
        let r = fc.reference.as_ref().unwrap();
        assert_eq!(r.points.len(), 4);
        assert_eq!(r.class_labels.as_ref().unwrap()[2], "hi");
        let calls = m.space("calls").unwrap();
        assert_eq!(calls.clustering.member_counts, vec![2, 1, 1]);
        assert_eq!(calls.cluster_label(2), "c");
        assert!(matches!(m.space("nope"), Err(ModelError::UnfittedSpace(_))));
    }

    #[test]
    fn projection_and_auto_k() {
        let cfgs = [SpaceConfig::continuous("fc").with_projection(1)];
        let m = fit_model(&corpus(), &cfgs, 1).unwrap();
        let fc = m.space("fc").unwrap();
        assert_eq!(fc.embedder.output_dim(), Some(1));
        assert_eq!(fc.clustering.k(), 2);
    }

    #[test]
    fn missing_space_and_kind_errors() {
        assert!(matches!(fit_model(&corpus(), &[SpaceConfig::discrete("other")], 0), Err(ModelError::NoStates(_))));
        assert!(matches!(fit_model(&corpus(), &[SpaceConfig::discrete("fc")], 0), Err(ModelError::AtEvent { .. })));
        assert!(matches!(
            fit_model(&corpus(), &[SpaceConfig::continuous("fc").with_k(9)], 0),
            Err(ModelError::Aggregation { .. })
        ));
    }

    #[test]
    fn placement_uses_default_epsilon() {
        let cfgs = [SpaceConfig::continuous("fc").with_k(2), SpaceConfig::discrete("calls")];
        let m = fit_model(&corpus(), &cfgs, 1).unwrap();
        let ev = TraceEvent::vector("q", 0, "fc", vec![50.0, 25.0]);
        let (_, p) = m.place_event(&ev, None).unwrap();
        assert!(p.assignment.outlier);
        let (_, p) = m.place_event(&ev, Some(&EpsilonPolicy::Global(f64::INFINITY))).unwrap();
        assert!(!p.assignment.outlier);
        let unseen = TraceEvent::token("q", 1, "calls", "zzz");
        assert!(m.place_event(&unseen, None).unwrap().1.assignment.outlier);
        let bad = TraceEvent::vector("q", 3, "fc", vec![1.0]);
        let err = m.place_event(&bad, None).unwrap_err();
        assert!(err.to_string().starts_with("execution 'q' step 3"), "{err}");
    }
}
