//! Semantic flow graphs: clusters as nodes, observed transitions as
//! counted edges, every execution wrapped START → … → TERMINAL(outcome).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::EpsilonPolicy;
use crate::model::{LatentModel, ModelError};
use crate::trace::{Execution, Outcome, SpaceRole};

#[derive(Debug, Error, PartialEq)]
pub enum SfgError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("model has no control-role space")]
    NoControlSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NodeKind {
    Start,
    Cluster,
    Outlier,
    Terminal,
}

/// Identity of a node independent of its numeric id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKey {
    Start,
    Cluster {
        space_id: String,
        cluster_id: usize,
    },
    Outlier {
        space_id: String,
    },
    Terminal {
        outcome: Outcome,
    },
    /// Catch-all for nodes never seen by a fitted predictor.
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfgNode {
    pub node_id: usize,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_outcome: Option<Outcome>,
    #[serde(default)]
    pub control: bool,
    pub label: String,
}

impl SfgNode {
    pub fn key(&self) -> NodeKey {
        match self.kind {
            NodeKind::Start => NodeKey::Start,
            NodeKind::Cluster => NodeKey::Cluster {
                space_id: self.space_id.clone().unwrap_or_default(),
                cluster_id: self.cluster_id.unwrap_or_default(),
            },
            NodeKind::Outlier => NodeKey::Outlier { space_id: self.space_id.clone().unwrap_or_default() },
            NodeKind::Terminal => NodeKey::Terminal { outcome: self.terminal_outcome.unwrap_or_default() },
        }
    }

    pub fn is_internal(&self) -> bool {
        matches!(self.kind, NodeKind::Cluster | NodeKind::Outlier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SfgEdge {
    pub src: usize,
    pub dst: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecPath {
    pub exec_id: String,
    pub outcome: Outcome,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticFlowGraph {
    pub nodes: Vec<SfgNode>,
    /// Sorted by (src, dst).
    pub edges: Vec<SfgEdge>,
    pub exec_count: usize,
    pub paths: Vec<ExecPath>,
}

pub const START: usize = 0;

impl SemanticFlowGraph {
    pub fn node(&self, id: usize) -> &SfgNode {
        &self.nodes[id]
    }

    pub fn find(&self, key: &NodeKey) -> Option<usize> {
        self.nodes.iter().position(|n| &n.key() == key)
    }

    pub fn find_label(&self, label: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.label == label)
    }

    pub fn edge_count(&self, src: usize, dst: usize) -> u64 {
        self.edges.binary_search_by(|e| (e.src, e.dst).cmp(&(src, dst))).map_or(0, |i| self.edges[i].count)
    }

    pub fn in_count(&self, id: usize) -> u64 {
        self.edges.iter().filter(|e| e.dst == id).map(|e| e.count).sum()
    }

    pub fn out_count(&self, id: usize) -> u64 {
        self.edges.iter().filter(|e| e.src == id).map(|e| e.count).sum()
    }

    /// Edges as (src key, dst key, count), sorted. Two graphs over the same
    /// executions compare equal here regardless of node numbering.
    pub fn canonical_edges(&self) -> Vec<(NodeKey, NodeKey, u64)> {
        let mut out: Vec<_> =
            self.edges.iter().map(|e| (self.nodes[e.src].key(), self.nodes[e.dst].key(), e.count)).collect();
        out.sort();
        out
    }

    /// Checks START-out = TERMINAL-in = exec_count and inflow = outflow on
    /// every internal node. Returns a description of the first violation.
    pub fn check_flow(&self) -> Result<(), String> {
        let start_out = self.out_count(START);
        if start_out != self.exec_count as u64 {
            return Err(format!("START emits {start_out}, exec_count is {}", self.exec_count));
        }
        let term_in: u64 =
            self.nodes.iter().filter(|n| n.kind == NodeKind::Terminal).map(|n| self.in_count(n.node_id)).sum();
        if term_in != self.exec_count as u64 {
            return Err(format!("terminals absorb {term_in}, exec_count is {}", self.exec_count));
        }
        for n in self.nodes.iter().filter(|n| n.is_internal()) {
            let (i, o) = (self.in_count(n.node_id), self.out_count(n.node_id));
            if i != o {
                return Err(format!("node {} ({}) has inflow {i} and outflow {o}", n.node_id, n.label));
            }
        }
        Ok(())
    }

    /// Node paths with the given edge counts summed. Used when merging
    /// graphs built over disjoint execution subsets.
    pub fn merge(&self, other: &SemanticFlowGraph) -> SemanticFlowGraph {
        let mut b = Builder::new();
        for g in [self, other] {
            for p in &g.paths {
                let keys: Vec<_> = p.nodes.iter().map(|&id| g.nodes[id].clone()).collect();
                b.push_path(&p.exec_id, p.outcome, keys);
            }
        }
        b.finish()
    }
}

struct Builder {
    nodes: Vec<SfgNode>,
    ids: HashMap<NodeKey, usize>,
    edges: BTreeMap<(usize, usize), u64>,
    paths: Vec<ExecPath>,
}

impl Builder {
    fn new() -> Self {
        let start = SfgNode {
            node_id: START,
            kind: NodeKind::Start,
            space_id: None,
            cluster_id: None,
            terminal_outcome: None,
            control: false,
            label: "START".into(),
        };
        Self {
            ids: HashMap::from([(NodeKey::Start, START)]),
            nodes: vec![start],
            edges: BTreeMap::new(),
            paths: Vec::new(),
        }
    }

    fn intern(&mut self, mut node: SfgNode) -> usize {
        let key = node.key();
        if let Some(&id) = self.ids.get(&key) {
            return id;
        }
        let id = self.nodes.len();
        node.node_id = id;
        self.nodes.push(node);
        self.ids.insert(key, id);
        id
    }

    /// `nodes` are the inner nodes plus the terminal; START is implicit
    /// when absent.
    fn push_path(&mut self, exec_id: &str, outcome: Outcome, nodes: Vec<SfgNode>) {
        let mut ids = Vec::with_capacity(nodes.len() + 1);
        for n in nodes {
            ids.push(self.intern(n));
        }
        if ids.first() != Some(&START) {
            ids.insert(0, START);
        }
        for w in ids.windows(2) {
            *self.edges.entry((w[0], w[1])).or_default() += 1;
        }
        self.paths.push(ExecPath { exec_id: exec_id.to_owned(), outcome, nodes: ids });
    }

    fn finish(self) -> SemanticFlowGraph {
        SemanticFlowGraph {
            nodes: self.nodes,
            edges: self.edges.into_iter().map(|((src, dst), count)| SfgEdge { src, dst, count }).collect(),
            exec_count: self.paths.len(),
            paths: self.paths,
        }
    }
}

fn terminal(outcome: Outcome) -> SfgNode {
    SfgNode {
        node_id: 0,
        kind: NodeKind::Terminal,
        space_id: None,
        cluster_id: None,
        terminal_outcome: Some(outcome),
        control: false,
        label: outcome.as_str().to_uppercase(),
    }
}

/// Maps one execution's events to SFG nodes (without START/TERMINAL).
pub fn execution_nodes(
    model: &LatentModel,
    exec: &Execution,
    eps: Option<&EpsilonPolicy>,
) -> Result<Vec<SfgNode>, ModelError> {
    exec.events
        .iter()
        .map(|ev| {
            let (space, placement) = model.place_event(ev, eps)?;
            let control = space.role() == SpaceRole::Control;
            Ok(match placement.assignment.cluster_id() {
                Some(c) => SfgNode {
                    node_id: 0,
                    kind: NodeKind::Cluster,
                    space_id: Some(space.space_id().to_owned()),
                    cluster_id: Some(c),
                    terminal_outcome: None,
                    control,
                    label: space.cluster_label(c),
                },
                None => SfgNode {
                    node_id: 0,
                    kind: NodeKind::Outlier,
                    space_id: Some(space.space_id().to_owned()),
                    cluster_id: None,
                    terminal_outcome: None,
                    control,
                    label: format!("{}:OUTLIER", space.space_id()),
                },
            })
        })
        .collect()
}

/// Builds the SFG of `executions`. `eps` overrides each space's default
/// ε policy when given.
pub fn build_sfg(
    executions: &[Execution],
    model: &LatentModel,
    eps: Option<&EpsilonPolicy>,
) -> Result<SemanticFlowGraph, SfgError> {
    let mut b = Builder::new();
    for exec in executions {
        let mut nodes = execution_nodes(model, exec, eps)?;
        nodes.push(terminal(exec.outcome));
        b.push_path(&exec.exec_id, exec.outcome, nodes);
    }
    Ok(b.finish())
}

/// Like [`build_sfg`] but requires at least one control-role space, whose
/// tokens become control nodes interleaved with semantic clusters.
pub fn build_sacfg(
    executions: &[Execution],
    model: &LatentModel,
    eps: Option<&EpsilonPolicy>,
) -> Result<SemanticFlowGraph, SfgError> {
    if !model.has_control_space() {
        return Err(SfgError::NoControlSpace);
    }
    build_sfg(executions, model, eps)
}

fn dot_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out
}

/// Graphviz rendering. Nodes in id order, edges in (src, dst) order, edge
/// labels carry counts. Pass terminals are blue, fail terminals red.
pub fn to_dot(graph: &SemanticFlowGraph) -> String {
    let mut s = String::from("digraph sfg {\n  rankdir=TB;\n  node [fontname=\"Helvetica\"];\n");
    for n in &graph.nodes {
        let style = match (n.kind, n.terminal_outcome) {
            (NodeKind::Start, _) => "shape=circle".to_owned(),
            (NodeKind::Terminal, Some(Outcome::Pass)) => {
                "shape=doublecircle, style=filled, fillcolor=\"#6baed6\"".to_owned()
            }
            (NodeKind::Terminal, Some(Outcome::Fail)) => {
                "shape=doublecircle, style=filled, fillcolor=\"#fb6a4a\"".to_owned()
            }
            (NodeKind::Terminal, _) => "shape=doublecircle, style=filled, fillcolor=\"#d9d9d9\"".to_owned(),
            (NodeKind::Outlier, _) => "shape=box, style=dashed".to_owned(),
            (NodeKind::Cluster, _) if n.control => "shape=diamond".to_owned(),
            (NodeKind::Cluster, _) => "shape=box, style=rounded".to_owned(),
        };
        let _ = writeln!(s, "  n{} [label=\"{}\", {}];", n.node_id, dot_escape(&n.label), style);
    }
    for e in &graph.edges {
        let _ = writeln!(s, "  n{} -> n{} [label=\"{}\"];", e.src, e.dst, e.count);
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fit_model;
    use crate::trace::SpaceConfig;

    fn token_exec(id: &str, outcome: Outcome, tokens: &[&str]) -> Execution {
        let mut e = Execution::new(id, outcome);
        for t in tokens {
            e.push_token("calls", *t);
        }
        e
    }

    fn fit_calls(execs: &[Execution]) -> LatentModel {
        fit_model(execs, &[SpaceConfig::discrete("calls")], 0).unwrap()
    }

    #[test]
    fn single_path() {
        let execs = vec![token_exec("e", Outcome::Pass, &["A", "B"])];
        let g = build_sfg(&execs, &fit_calls(&execs), None).unwrap();
        let labels: Vec<_> = g.nodes.iter().map(|n| n.label.as_str()).collect();
        assert_eq!(labels, vec!["START", "A", "B", "PASS"]);
        assert_eq!(g.edges.len(), 3);
        assert!(g.edges.iter().all(|e| e.count == 1));
        assert_eq!(g.paths[0].nodes, vec![0, 1, 2, 3]);
        g.check_flow().unwrap();
    }

    #[test]
    fn empty_execution_set() {
        let model = fit_calls(&[token_exec("e", Outcome::Pass, &["A"])]);
        let g = build_sfg(&[], &model, None).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.exec_count, 0);
        assert!(g.edges.is_empty());
        assert_eq!(to_dot(&g), "digraph sfg {\n  rankdir=TB;\n  node [fontname=\"Helvetica\"];\n  n0 [label=\"START\", shape=circle];\n}\n");
    }

    #[test]
    fn self_loops_and_outliers() {
        let train = vec![token_exec("t", Outcome::Pass, &["A", "A"])];
        let model = fit_calls(&train);
        let test = vec![token_exec("q", Outcome::Fail, &["A", "Z", "A"])];
        let g = build_sfg(&test, &model, None).unwrap();
        let a = g.find_label("A").unwrap();
        let o = g.find(&NodeKey::Outlier { space_id: "calls".into() }).unwrap();
        assert_eq!(g.edge_count(a, o), 1);
        assert_eq!(g.edge_count(o, a), 1);
        g.check_flow().unwrap();
        let g = build_sfg(&train, &model, None).unwrap();
        assert_eq!(g.edge_count(1, 1), 1);
    }

    #[test]
    fn unfitted_space() {
        let model = fit_calls(&[token_exec("e", Outcome::Pass, &["A"])]);
        let mut e = Execution::new("x", Outcome::Pass);
        e.push_token("other", "A");
        assert!(matches!(build_sfg(&[e], &model, None), Err(SfgError::Model(ModelError::AtEvent { .. }))));
    }

    #[test]
    fn sacfg_requires_control() {
        let execs = vec![token_exec("e", Outcome::Pass, &["A"])];
        assert_eq!(build_sacfg(&execs, &fit_calls(&execs), None), Err(SfgError::NoControlSpace));
    }

    #[test]
    fn sacfg_interleaves_control() {
        let mut e = Execution::new("e", Outcome::Pass);
        e.push_token("loc", "L1").push_vector("fc", vec![0.0, 0.0]).push_token("loc", "L2");
        let cfgs = [SpaceConfig::control("loc"), SpaceConfig::continuous("fc").with_k(1)];
        let model = fit_model(std::slice::from_ref(&e), &cfgs, 0).unwrap();
        let g = build_sacfg(&[e], &model, None).unwrap();
        let labels: Vec<_> = g.paths[0].nodes.iter().map(|&i| g.nodes[i].label.as_str()).collect();
        assert_eq!(labels, vec!["START", "L1", "fc#0", "L2", "PASS"]);
        assert!(g.nodes[1].control && !g.nodes[2].control);
    }

    #[test]
    fn shared_control_distinct_semantics() {
        let run = |id: &str, v: Vec<f64>| {
            let mut e = Execution::new(id, Outcome::Pass);
            e.push_token("loc", "L1").push_vector("fc", v).push_token("loc", "L2");
            e
        };
        let execs = [run("near", vec![0.0, 0.0]), run("far", vec![100.0, 100.0])];
        let cfgs = [SpaceConfig::control("loc"), SpaceConfig::continuous("fc").with_k(2)];
        let model = fit_model(&execs, &cfgs, 0).unwrap();
        let g = build_sacfg(&execs, &model, None).unwrap();
        let (a, b) = (&g.paths[0].nodes, &g.paths[1].nodes);
        assert_eq!((a[1], a[3]), (b[1], b[3]));
        assert!(g.nodes[a[1]].control && g.nodes[a[3]].control);
        assert_ne!(a[2], b[2]);
        assert_eq!(g.check_flow(), Ok(()));
    }

    #[test]
    fn dot_escapes_quotes() {
        let execs = vec![token_exec("e", Outcome::Fail, &[r#"f({"a":"b\c"})"#])];
        let dot = to_dot(&build_sfg(&execs, &fit_calls(&execs), None).unwrap());
        assert!(dot.contains(r#"label="f({\"a\":\"b\\c\"})""#), "{dot}");
        assert!(dot.contains("fillcolor=\"#fb6a4a\""));
    }

    #[test]
    fn merge_matches_sequential_build() {
        let execs = vec![
            token_exec("a", Outcome::Pass, &["A", "B"]),
            token_exec("b", Outcome::Fail, &["A", "C"]),
            token_exec("c", Outcome::Pass, &["B", "B"]),
        ];
        let model = fit_calls(&execs);
        let whole = build_sfg(&execs, &model, None).unwrap();
        let left = build_sfg(&execs[..1], &model, None).unwrap();
        let right = build_sfg(&execs[1..], &model, None).unwrap();
        assert_eq!(left.merge(&right).canonical_edges(), whole.canonical_edges());
    }
}
