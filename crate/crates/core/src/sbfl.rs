//! Spectrum-based fault localization over SFG nodes and edges.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sfg::SemanticFlowGraph;
use crate::trace::Outcome;

#[derive(Debug, Error, PartialEq)]
pub enum SbflError {
    #[error("no execution is labeled pass or fail")]
    NoLabeledExecutions,
    #[error("no failing executions; suspiciousness is undefined")]
    NoFailures,
}

/// A rankable program element: a cluster node or a length-2 flow pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Element {
    Node { id: usize },
    Edge { src: usize, dst: usize },
}

impl Element {
    pub fn kind_str(&self) -> &'static str {
        match self {
            Element::Node { .. } => "node",
            Element::Edge { .. } => "edge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub e_p: u64,
    pub e_f: u64,
    pub n_p: u64,
    pub n_f: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub element: Element,
    pub label: String,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub passed: u64,
    pub failed: u64,
    /// Executions with unknown outcome, left out of every counter.
    pub excluded_unknown: u64,
    pub entries: Vec<SpectrumEntry>,
}

/// Counts, for every non-START/TERMINAL node and every edge between such
/// nodes, how many passing/failing executions visit it.
pub fn collect_spectrum(graph: &SemanticFlowGraph) -> Result<Spectrum, SbflError> {
    let rankable = |id: usize| graph.nodes[id].is_internal();
    let mut hits: BTreeMap<Element, (u64, u64)> = BTreeMap::new();
    for n in graph.nodes.iter().filter(|n| n.is_internal()) {
        hits.insert(Element::Node { id: n.node_id }, (0, 0));
    }
    for e in graph.edges.iter().filter(|e| rankable(e.src) && rankable(e.dst)) {
        hits.insert(Element::Edge { src: e.src, dst: e.dst }, (0, 0));
    }

    let (mut passed, mut failed, mut unknown) = (0, 0, 0);
    for path in &graph.paths {
        match path.outcome {
            Outcome::Pass => passed += 1,
            Outcome::Fail => failed += 1,
            Outcome::Unknown => {
                unknown += 1;
                continue;
            }
        }
        let mut covered: BTreeSet<Element> = path.nodes.iter().map(|&id| Element::Node { id }).collect();
        covered.extend(path.nodes.windows(2).map(|w| Element::Edge { src: w[0], dst: w[1] }));
        for el in covered {
            if let Some(h) = hits.get_mut(&el) {
                if path.outcome == Outcome::Pass {
                    h.0 += 1;
                } else {
                    h.1 += 1;
                }
            }
        }
    }
    if passed + failed == 0 {
        return Err(SbflError::NoLabeledExecutions);
    }

    let entries = hits
        .into_iter()
        .map(|(element, (e_p, e_f))| SpectrumEntry {
            label: match element {
                Element::Node { id } => graph.nodes[id].label.clone(),
                Element::Edge { src, dst } => format!("{} -> {}", graph.nodes[src].label, graph.nodes[dst].label),
            },
            counts: Counts { e_p, e_f, n_p: passed - e_p, n_f: failed - e_f },
            element,
        })
        .collect();
    Ok(Spectrum { passed, failed, excluded_unknown: unknown, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Formula {
    #[default]
    Ochiai,
    Tarantula,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// e_f / √((e_f + n_f)(e_f + e_p)); 0/0 → 0.
pub fn ochiai(c: Counts) -> f64 {
    let den = (((c.e_f + c.n_f) * (c.e_f + c.e_p)) as f64).sqrt();
    ratio(c.e_f as f64, den)
}

/// (e_f/F) / (e_f/F + e_p/P); each 0/0 → 0.
pub fn tarantula(c: Counts) -> f64 {
    let fail = ratio(c.e_f as f64, (c.e_f + c.n_f) as f64);
    let pass = ratio(c.e_p as f64, (c.e_p + c.n_p) as f64);
    ratio(fail, fail + pass)
}

impl Formula {
    pub fn score(self, c: Counts) -> f64 {
        match self {
            Formula::Ochiai => ochiai(c),
            Formula::Tarantula => tarantula(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub rank: usize,
    pub element: Element,
    pub label: String,
    pub counts: Counts,
    pub score: f64,
}

/// Elements by descending score; ties by element (nodes by id, then edges
/// by (src, dst)).
pub fn rank(spectrum: &Spectrum, formula: Formula) -> Result<Vec<Ranked>, SbflError> {
    if spectrum.failed == 0 {
        return Err(SbflError::NoFailures);
    }
    let mut scored: Vec<(f64, &SpectrumEntry)> =
        spectrum.entries.iter().map(|e| (formula.score(e.counts), e)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.element.cmp(&b.1.element)));
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (score, e))| Ranked {
            rank: i + 1,
            element: e.element,
            label: e.label.clone(),
            counts: e.counts,
            score,
        })
        .collect())
}

/// Keeps only node elements (or only edges) of a ranking, renumbering ranks.
pub fn filter_kind(ranked: Vec<Ranked>, nodes: bool) -> Vec<Ranked> {
    ranked
        .into_iter()
        .filter(|r| matches!(r.element, Element::Node { .. }) == nodes)
        .enumerate()
        .map(|(i, r)| Ranked { rank: i + 1, ..r })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fit_model;
    use crate::sfg::build_sfg;
    use crate::trace::{Execution, SpaceConfig};
    use proptest::prelude::*;

    fn c(e_p: u64, e_f: u64, n_p: u64, n_f: u64) -> Counts {
        Counts { e_p, e_f, n_p, n_f }
    }

    #[test]
    fn formulas_by_hand() {
        assert_eq!(ochiai(c(0, 3, 5, 0)), 1.0);
        assert_eq!(ochiai(c(1, 1, 1, 1)), 0.5);
        assert_eq!(ochiai(c(0, 0, 4, 2)), 0.0);
        assert_eq!(tarantula(c(0, 0, 4, 2)), 0.0);
        assert_eq!(tarantula(c(0, 2, 3, 0)), 1.0);
        // (1/2) / (1/2 + 1/4)
        assert!((tarantula(c(1, 1, 3, 1)) - 2.0 / 3.0).abs() < 1e-15);
    }

    fn graph(runs: &[(&str, Outcome, &[&str])]) -> SemanticFlowGraph {
        let execs: Vec<Execution> = runs
            .iter()
            .map(|(id, o, ts)| {
                let mut e = Execution::new(*id, *o);
                for t in ts.iter() {
                    e.push_token("calls", *t);
                }
                e
            })
            .collect();
        let m = fit_model(&execs, &[SpaceConfig::discrete("calls")], 0).unwrap();
        build_sfg(&execs, &m, None).unwrap()
    }

    #[test]
    fn direct_counts() {
        let g = graph(&[
            ("f1", Outcome::Fail, &["A", "X"]),
            ("f2", Outcome::Fail, &["X", "X"]),
            ("p1", Outcome::Pass, &["A"]),
            ("p2", Outcome::Pass, &["A", "B"]),
            ("p3", Outcome::Pass, &["B"]),
            ("u", Outcome::Unknown, &["X"]),
        ]);
        let s = collect_spectrum(&g).unwrap();
        assert_eq!((s.passed, s.failed, s.excluded_unknown), (3, 2, 1));
        let x = g.find_label("X").unwrap();
        let get = |el: Element| s.entries.iter().find(|e| e.element == el).unwrap().counts;
        assert_eq!(get(Element::Node { id: x }), c(0, 2, 3, 0));
        let a = g.find_label("A").unwrap();
        assert_eq!(get(Element::Node { id: a }), c(2, 1, 1, 1));
        assert_eq!(get(Element::Edge { src: x, dst: x }), c(0, 1, 3, 1));
        // START/TERMINAL never appear
        assert!(s.entries.iter().all(|e| match e.element {
            Element::Node { id } => g.nodes[id].is_internal(),
            Element::Edge { src, dst } => g.nodes[src].is_internal() && g.nodes[dst].is_internal(),
        }));

        let r = rank(&s, Formula::Ochiai).unwrap();
        assert_eq!(r[0].element, Element::Node { id: x });
        assert_eq!(r[0].score, 1.0);
        assert!(r.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn everyone_visits() {
        let g = graph(&[("f", Outcome::Fail, &["A"]), ("p", Outcome::Pass, &["A"])]);
        let s = collect_spectrum(&g).unwrap();
        assert_eq!(s.entries[0].counts, c(1, 1, 0, 0));
    }

    #[test]
    fn errors() {
        let g = graph(&[("u", Outcome::Unknown, &["A"])]);
        assert_eq!(collect_spectrum(&g), Err(SbflError::NoLabeledExecutions));
        let g = graph(&[("p", Outcome::Pass, &["A"])]);
        let s = collect_spectrum(&g).unwrap();
        assert_eq!(rank(&s, Formula::Ochiai), Err(SbflError::NoFailures));
    }

    #[test]
    fn ties_by_node_id() {
        let g = graph(&[("f", Outcome::Fail, &["A", "B", "C"]), ("p", Outcome::Pass, &["D"])]);
        let r = filter_kind(rank(&collect_spectrum(&g).unwrap(), Formula::Tarantula).unwrap(), true);
        let ids: Vec<_> = r.iter().map(|x| x.element).collect();
        assert_eq!(ids[..3], [Element::Node { id: 1 }, Element::Node { id: 2 }, Element::Node { id: 3 }]);
        assert_eq!(r.last().unwrap().score, 0.0);
    }

    fn counts() -> impl Strategy<Value = (u64, u64, u64, u64)> {
        (0u64..20, 0u64..20, 1u64..20, 1u64..20).prop_map(|(a, b, p, f)| (a.min(p), b.min(f), p, f))
    }

    proptest! {
        #[test]
        fn monotone_in_failures((e_p, e_f, p, f) in counts()) {
            prop_assume!(e_f < f);
            let lo = c(e_p, e_f, p - e_p, f - e_f);
            let hi = c(e_p, e_f + 1, p - e_p, f - e_f - 1);
            prop_assert!(ochiai(hi) >= ochiai(lo));
            prop_assert!(tarantula(hi) >= tarantula(lo));
        }

        #[test]
        fn tarantula_label_swap((e_p, e_f, p, f) in counts()) {
            let orig = c(e_p, e_f, p - e_p, f - e_f);
            let swapped = c(e_f, e_p, f - e_f, p - e_p);
            prop_assume!(e_p + e_f > 0);
            prop_assert!((tarantula(swapped) - (1.0 - tarantula(orig))).abs() < 1e-12);
        }

        #[test]
        fn scores_in_unit_interval((e_p, e_f, p, f) in counts()) {
            let k = c(e_p, e_f, p - e_p, f - e_f);
            for s in [ochiai(k), tarantula(k)] {
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }
    }
}
