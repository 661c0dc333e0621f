//! Outcome prediction from (partial) SFG paths with class-conditional
//! first-order Markov chains and a log-likelihood-ratio decision.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::EpsilonPolicy;
use crate::model::{LatentModel, ModelError};
use crate::sfg::{execution_nodes, ExecPath, NodeKey, NodeKind, SemanticFlowGraph};
use crate::trace::{Execution, Outcome};

pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum PredictError {
    #[error("training data needs at least one pass and one fail path")]
    OneClassOnly,
    #[error("smoothing parameter must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("cannot score an empty path")]
    EmptyPath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPath {
    pub nodes: Vec<NodeKey>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    /// Node vocabulary; the last entry is the UNSEEN catch-all.
    pub vocab: Vec<NodeKey>,
    pub alpha: f64,
    /// Row-major V×V transition probabilities.
    pub pass_table: Vec<f64>,
    pub fail_table: Vec<f64>,
    pub prior_pass: f64,
    pub prior_fail: f64,
    #[serde(skip)]
    index: HashMap<NodeKey, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// log P(path | pass) − log P(path | fail) + log prior ratio.
    pub score: f64,
    pub label: Outcome,
    pub steps_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Continue,
    Abort,
}

impl OutcomeModel {
    /// P_c(j|i) = (count_c(i→j) + α) / (Σ_k count_c(i→k) + α·V). The
    /// vocabulary is every node in `paths` and `extra_vocab`, plus UNSEEN.
    /// Paths with unknown outcome contribute vocabulary only.
    pub fn fit(paths: &[LabeledPath], extra_vocab: &[NodeKey], alpha: f64) -> Result<Self, PredictError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(PredictError::BadAlpha(alpha));
        }
        let n_pass = paths.iter().filter(|p| p.outcome == Outcome::Pass).count();
        let n_fail = paths.iter().filter(|p| p.outcome == Outcome::Fail).count();
        if n_pass == 0 || n_fail == 0 {
            return Err(PredictError::OneClassOnly);
        }

        let mut vocab = Vec::new();
        let mut index = HashMap::new();
        for key in paths.iter().flat_map(|p| &p.nodes).chain(extra_vocab) {
            if *key != NodeKey::Unseen && !index.contains_key(key) {
                index.insert(key.clone(), vocab.len());
                vocab.push(key.clone());
            }
        }
        index.insert(NodeKey::Unseen, vocab.len());
        vocab.push(NodeKey::Unseen);
        let v = vocab.len();

        let mut pass_counts = vec![0u64; v * v];
        let mut fail_counts = vec![0u64; v * v];
        for p in paths {
            let counts = match p.outcome {
                Outcome::Pass => &mut pass_counts,
                Outcome::Fail => &mut fail_counts,
                Outcome::Unknown => continue,
            };
            for w in p.nodes.windows(2) {
                counts[index[&w[0]] * v + index[&w[1]]] += 1;
            }
        }
        let normalize = |counts: &[u64]| -> Vec<f64> {
            let mut table = vec![0.0; v * v];
            for i in 0..v {
                let row = &counts[i * v..(i + 1) * v];
                let total = row.iter().sum::<u64>() as f64 + alpha * v as f64;
                for j in 0..v {
                    table[i * v + j] = (row[j] as f64 + alpha) / total;
                }
            }
            table
        };
        let total = (n_pass + n_fail) as f64;
        Ok(Self {
            pass_table: normalize(&pass_counts),
            fail_table: normalize(&fail_counts),
            prior_pass: n_pass as f64 / total,
            prior_fail: n_fail as f64 / total,
            vocab,
            alpha,
            index,
        })
    }

    /// Fits on the labeled paths of a reference graph. Terminal nodes are
    /// dropped (they encode the outcome); every space's OUTLIER node joins
    /// the vocabulary even if unobserved.
    pub fn fit_graph(graph: &SemanticFlowGraph, model: Option<&LatentModel>, alpha: f64) -> Result<Self, PredictError> {
        let paths: Vec<LabeledPath> =
            graph.paths.iter().map(|p| LabeledPath { nodes: path_keys(graph, p, None), outcome: p.outcome }).collect();
        let mut extra: Vec<NodeKey> =
            graph.nodes.iter().filter(|n| n.kind != NodeKind::Terminal).map(|n| n.key()).collect();
        if let Some(m) = model {
            extra.extend(m.spaces.keys().map(|s| NodeKey::Outlier { space_id: s.clone() }));
        }
        Self::fit(&paths, &extra, alpha)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn rebuild_index(&mut self) {
        self.index = self.vocab.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
    }

    fn id(&self, key: &NodeKey) -> usize {
        self.index.get(key).copied().unwrap_or(self.vocab.len() - 1)
    }

    pub fn transition(&self, outcome: Outcome, from: &NodeKey, to: &NodeKey) -> f64 {
        let v = self.vocab.len();
        let table = if outcome == Outcome::Fail { &self.fail_table } else { &self.pass_table };
        table[self.id(from) * v + self.id(to)]
    }

    pub fn log_prior_ratio(&self) -> f64 {
        self.prior_pass.ln() - self.prior_fail.ln()
    }

    /// Sum over consecutive pairs of log P_pass − log P_fail.
    pub fn transition_llr(&self, path: &[NodeKey]) -> f64 {
        let v = self.vocab.len();
        path.windows(2)
            .map(|w| {
                let at = self.id(&w[0]) * v + self.id(&w[1]);
                self.pass_table[at].ln() - self.fail_table[at].ln()
            })
            .sum()
    }

    /// Score ≥ 0 predicts pass. `steps_used` counts the non-START nodes.
    pub fn score_path(&self, path: &[NodeKey]) -> Result<Prediction, PredictError> {
        if path.is_empty() {
            return Err(PredictError::EmptyPath);
        }
        let score = self.log_prior_ratio() + self.transition_llr(path);
        Ok(Prediction {
            score,
            label: if score >= 0.0 { Outcome::Pass } else { Outcome::Fail },
            steps_used: path.iter().filter(|k| **k != NodeKey::Start).count(),
        })
    }

    /// Abort iff score(prefix) < −τ.
    pub fn early_termination(&self, prefix: &[NodeKey], tau: f64) -> Result<Decision, PredictError> {
        let p = self.score_path(prefix)?;
        Ok(if p.score < -tau { Decision::Abort } else { Decision::Continue })
    }

    /// Loads a serialized model, restoring the lookup index.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut m: Self = serde_json::from_str(text)?;
        m.rebuild_index();
        Ok(m)
    }
}

pub fn fit_outcome_model(graph: &SemanticFlowGraph, alpha: f64) -> Result<OutcomeModel, PredictError> {
    OutcomeModel::fit_graph(graph, None, alpha)
}

pub fn score_path(model: &OutcomeModel, path: &[NodeKey]) -> Result<Prediction, PredictError> {
    model.score_path(path)
}

pub fn early_termination(model: &OutcomeModel, prefix: &[NodeKey], tau: f64) -> Result<Decision, PredictError> {
    model.early_termination(prefix, tau)
}

/// Node keys of a recorded path without its terminal, optionally cut to
/// START plus the first `prefix_steps` event nodes.
pub fn path_keys(graph: &SemanticFlowGraph, path: &ExecPath, prefix_steps: Option<usize>) -> Vec<NodeKey> {
    let mut keys: Vec<NodeKey> = path
        .nodes
        .iter()
        .map(|&id| &graph.nodes[id])
        .filter(|n| n.kind != NodeKind::Terminal)
        .map(|n| n.key())
        .collect();
    if let Some(n) = prefix_steps {
        keys.truncate(n + 1);
    }
    keys
}

/// START followed by the nodes an unseen execution maps to under `model`,
/// optionally cut to the first `prefix_steps` events.
pub fn execution_keys(
    model: &LatentModel,
    exec: &Execution,
    eps: Option<&EpsilonPolicy>,
    prefix_steps: Option<usize>,
) -> Result<Vec<NodeKey>, ModelError> {
    let nodes = execution_nodes(model, exec, eps)?;
    let take = prefix_steps.unwrap_or(nodes.len()).min(nodes.len());
    Ok(std::iter::once(NodeKey::Start).chain(nodes[..take].iter().map(|n| n.key())).collect())
}
