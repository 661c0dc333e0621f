use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use semflow::aggregation::EpsilonPolicy;
use semflow::coverage::{epsilon_coverage, soft_coverage, SoftAggregation};
use semflow::embedding::fit_projection;
use semflow::model::{fit_model, LatentModel, ModelFile};
use semflow::predict::{execution_keys, Decision, OutcomeModel};
use semflow::sbfl::{collect_spectrum, filter_kind, rank, Formula};
use semflow::sfg::{build_sacfg, build_sfg, to_dot, SemanticFlowGraph};
use semflow::surprise::{LabelSource, ScoreAggregation, SurpriseMethod, SurpriseOptions, SurpriseScorer};
use semflow::synth::{gen_layered_gaussian, gen_markov_corpus, LayeredGaussianSpec, MarkovCorpusSpec};
use semflow::trace::{
    infer_space_configs, parse_trace, validate as validate_trace, Execution, Payload, SpaceConfig, SpacesFile,
};

use crate::output::{csv_report, emit, json_report, num};
use crate::{
    BuildArgs, CoverageArgs, CsvFormat, Elements, FormulaArg, GraphArgs, GraphFormat, Labels, LocalizeArgs, Method,
    PredictArgs, ProjectArgs, SoftAgg, SurpriseArgs, SynthCommand, TableFormat, ValidateArgs,
};

/// Marks errors that should exit with the usage code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn load_traces(paths: &[PathBuf]) -> Result<Vec<Execution>> {
    let mut all = Vec::new();
    for p in paths {
        let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        let execs = parse_trace(BufReader::new(f)).with_context(|| format!("parsing {}", p.display()))?;
        all.extend(execs);
    }
    Ok(all)
}

fn load_spaces(path: Option<&Path>, execs: &[Execution]) -> Result<(Vec<SpaceConfig>, Option<u64>)> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let file = SpacesFile::from_json(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok((file.spaces, file.seed))
        }
        None => Ok((infer_space_configs(execs), None)),
    }
}

fn load_model(path: &Path) -> Result<(LatentModel, SemanticFlowGraph)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ModelFile = serde_json::from_str(&text).with_context(|| format!("parsing model {}", path.display()))?;
    Ok(file.into_parts()?)
}

fn global_eps(eps: Option<f64>) -> Option<EpsilonPolicy> {
    eps.map(EpsilonPolicy::Global)
}

fn summarize_violations(report: &semflow::trace::ValidationReport) -> String {
    let shown: Vec<String> = report.violations.iter().take(5).map(|v| v.message.clone()).collect();
    let more = report.violations.len().saturating_sub(shown.len());
    let mut s = shown.join("; ");
    if more > 0 {
        s.push_str(&format!("; and {more} more"));
    }
    s
}

pub fn validate(a: ValidateArgs) -> Result<()> {
    let execs = load_traces(&a.traces)?;
    let configs = match &a.spaces {
        Some(p) => Some(load_spaces(Some(p), &execs)?.0),
        None => None,
    };
    let report = validate_trace(&execs, configs.as_deref());
    let events: usize = execs.iter().map(|e| e.events.len()).sum();
    let text = match a.format {
        TableFormat::Json => json_report(&json!({
            "valid": report.is_valid(),
            "executions": execs.len(),
            "events": events,
            "violations": report.violations,
        }))?,
        TableFormat::Text => {
            let mut s = String::new();
            for v in &report.violations {
                s.push_str(&format!("{}: {}\n", serde_json::to_value(v.kind)?.as_str().unwrap_or("?"), v.message));
            }
            s.push_str(&format!(
                "{}: {} executions, {} events, {} violations\n",
                if report.is_valid() { "valid" } else { "invalid" },
                execs.len(),
                events,
                report.violations.len()
            ));
            s
        }
    };
    emit(a.out.as_deref(), &text)?;
    if !report.is_valid() {
        bail!("{} violation(s)", report.violations.len());
    }
    Ok(())
}

pub fn build(a: BuildArgs) -> Result<()> {
    let execs = load_traces(&a.traces)?;
    let (configs, file_seed) = load_spaces(a.spaces.as_deref(), &execs)?;
    let report = validate_trace(&execs, Some(&configs));
    if !report.is_valid() {
        bail!("trace is invalid: {}", summarize_violations(&report));
    }
    let seed = a.seed.or(file_seed).unwrap_or(0);
    let model = fit_model(&execs, &configs, seed)?;
    let graph = build_sfg(&execs, &model, None)?;
    graph.check_flow().map_err(|e| anyhow!("flow check failed: {e}"))?;
    eprintln!(
        "fitted {} space(s); graph has {} nodes, {} edges over {} executions",
        model.spaces.len(),
        graph.nodes.len(),
        graph.edges.len(),
        graph.exec_count
    );
    let text = serde_json::to_string_pretty(&ModelFile::new(&model, graph))? + "\n";
    emit(Some(&a.out), &text)
}

fn graph_for(
    model: &LatentModel,
    reference: SemanticFlowGraph,
    traces: &[PathBuf],
    eps: Option<f64>,
    sacfg: bool,
) -> Result<SemanticFlowGraph> {
    let eps = global_eps(eps);
    if traces.is_empty() {
        if sacfg && !model.has_control_space() {
            return Err(semflow::sfg::SfgError::NoControlSpace.into());
        }
        return Ok(reference);
    }
    let execs = load_traces(traces)?;
    Ok(if sacfg { build_sacfg(&execs, model, eps.as_ref())? } else { build_sfg(&execs, model, eps.as_ref())? })
}

pub fn graph(a: GraphArgs) -> Result<()> {
    let (model, reference) = load_model(&a.model)?;
    let g = graph_for(&model, reference, &a.traces, a.epsilon, a.sacfg)?;
    let text = match a.format {
        GraphFormat::Dot => to_dot(&g),
        GraphFormat::Json => json_report(&g)?,
    };
    emit(a.out.as_deref(), &text)
}

pub fn coverage(a: CoverageArgs) -> Result<()> {
    let (model, _) = load_model(&a.model)?;
    let execs = load_traces(&a.traces)?;
    let text = if a.soft {
        let sigma = a.sigma.ok_or_else(|| UsageError("--soft needs --sigma".into()))?;
        let agg = match a.soft_agg {
            SoftAgg::Max => SoftAggregation::Max,
            SoftAgg::Mean => SoftAggregation::Mean,
        };
        let r = soft_coverage(&model, &execs, sigma, agg)?;
        match a.format {
            TableFormat::Json => json_report(&r)?,
            TableFormat::Text => {
                let mut s = format!("{:<24} {:>8} {:>16}\n", "space", "cluster", "weight");
                for sp in &r.spaces {
                    for (c, w) in sp.weights.iter().enumerate() {
                        s.push_str(&format!("{:<24} {:>8} {:>16}\n", sp.space_id, c, num(*w)));
                    }
                }
                s.push_str(&format!("soft_ratio {} over {} clusters\n", num(r.soft_ratio), r.total_clusters));
                s
            }
        }
    } else {
        let r = epsilon_coverage(&model, &execs, global_eps(a.epsilon).as_ref())?;
        match a.format {
            TableFormat::Json => json_report(&r)?,
            TableFormat::Text => {
                let row = |name: &str, c: usize, t: usize, ratio: f64| {
                    format!("{:<24} {:>8} {:>8} {:>16}\n", name, c, t, num(ratio))
                };
                let mut s = format!("{:<24} {:>8} {:>8} {:>16}\n", "space", "covered", "total", "ratio");
                for sp in &r.spaces {
                    let ratio = if sp.total == 0 { 0.0 } else { sp.covered.len() as f64 / sp.total as f64 };
                    s.push_str(&row(&sp.space_id, sp.covered.len(), sp.total, ratio));
                }
                s.push_str(&row("TOTAL", r.covered_clusters, r.total_clusters, r.ratio));
                if let Some(c) = &r.control {
                    s.push_str(&row("CONTROL", c.covered_clusters, c.total_clusters, c.ratio));
                }
                s
            }
        }
    };
    emit(a.out.as_deref(), &text)
}

pub fn surprise(a: SurpriseArgs) -> Result<()> {
    let (model, _) = load_model(&a.model)?;
    let execs = load_traces(&a.traces)?;
    let opts = SurpriseOptions {
        method: match a.method {
            Method::Dsa => SurpriseMethod::Dsa,
            Method::Lsa => SurpriseMethod::Lsa,
        },
        aggregation: match a.aggregation {
            SoftAgg::Max => ScoreAggregation::Max,
            SoftAgg::Mean => ScoreAggregation::Mean,
        },
        labels: match a.labels {
            Labels::Cluster => LabelSource::Cluster,
            Labels::Class => LabelSource::Class,
        },
        bandwidth: a.bandwidth,
        epsilon: global_eps(a.epsilon),
    };
    let scorer = SurpriseScorer::new(&model, opts)?;
    let scores = execs.iter().map(|e| scorer.score(e)).collect::<Result<Vec<_>, _>>()?;
    let text = match a.format {
        CsvFormat::Json => json_report(&scores)?,
        CsvFormat::Csv => {
            let rows: Vec<Vec<String>> = scores
                .iter()
                .map(|s| {
                    let flagged: Vec<String> = s.flagged_outlier_steps().iter().map(u64::to_string).collect();
                    vec![
                        s.exec_id.clone(),
                        s.method.as_str().into(),
                        s.aggregation.as_str().into(),
                        num(s.score),
                        flagged.join(";"),
                    ]
                })
                .collect();
            csv_report(&["exec_id", "method", "aggregation", "score", "flagged_outlier_steps"], &rows)?
        }
    };
    emit(a.out.as_deref(), &text)
}

pub fn localize(a: LocalizeArgs) -> Result<()> {
    let (model, reference) = load_model(&a.model)?;
    let g = graph_for(&model, reference, &a.traces, a.epsilon, false)?;
    let spectrum = collect_spectrum(&g)?;
    let formula = match a.formula {
        FormulaArg::Ochiai => Formula::Ochiai,
        FormulaArg::Tarantula => Formula::Tarantula,
    };
    let mut ranked = rank(&spectrum, formula)?;
    match a.elements {
        Elements::All => {}
        Elements::Nodes => ranked = filter_kind(ranked, true),
        Elements::Edges => ranked = filter_kind(ranked, false),
    }
    let text = match a.format {
        CsvFormat::Json => json_report(&json!({
            "formula": formula,
            "passed": spectrum.passed,
            "failed": spectrum.failed,
            "excluded_unknown": spectrum.excluded_unknown,
            "ranking": ranked,
        }))?,
        CsvFormat::Csv => {
            let rows: Vec<Vec<String>> = ranked
                .iter()
                .map(|r| {
                    vec![
                        r.rank.to_string(),
                        r.element.kind_str().into(),
                        r.label.clone(),
                        r.counts.e_p.to_string(),
                        r.counts.e_f.to_string(),
                        r.counts.n_p.to_string(),
                        r.counts.n_f.to_string(),
                        num(r.score),
                    ]
                })
                .collect();
            csv_report(&["rank", "kind", "label", "e_p", "e_f", "n_p", "n_f", "score"], &rows)?
        }
    };
    emit(a.out.as_deref(), &text)
}

#[derive(Serialize)]
struct PredictRow<'a> {
    exec_id: &'a str,
    steps_used: usize,
    score: f64,
    label: semflow::Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    decision: Option<Decision>,
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let (model, reference) = load_model(&a.model)?;
    let om = OutcomeModel::fit_graph(&reference, Some(&model), a.alpha)?;
    let execs = load_traces(&a.traces)?;
    let eps = global_eps(a.epsilon);
    let mut rows = Vec::with_capacity(execs.len());
    for e in &execs {
        let keys = execution_keys(&model, e, eps.as_ref(), a.prefix_steps)?;
        let p = om.score_path(&keys)?;
        let decision = a.tau.map(|t| if p.score < -t { Decision::Abort } else { Decision::Continue });
        rows.push(PredictRow {
            exec_id: &e.exec_id,
            steps_used: p.steps_used,
            score: p.score,
            label: p.label,
            decision,
        });
    }
    let text = match a.format {
        CsvFormat::Json => json_report(&rows)?,
        CsvFormat::Csv => {
            let mut header = vec!["exec_id", "steps_used", "score", "label"];
            if a.tau.is_some() {
                header.push("decision");
            }
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut v =
                        vec![r.exec_id.to_owned(), r.steps_used.to_string(), num(r.score), r.label.as_str().into()];
                    if let Some(d) = r.decision {
                        v.push(if d == Decision::Abort { "abort" } else { "continue" }.into());
                    }
                    v
                })
                .collect();
            csv_report(&header, &table)?
        }
    };
    emit(a.out.as_deref(), &text)
}

pub fn project(a: ProjectArgs) -> Result<()> {
    let execs = load_traces(&a.traces)?;
    let space = match a.space {
        Some(s) => s,
        None => {
            let mut ids: Vec<&str> = execs
                .iter()
                .flat_map(|e| &e.events)
                .filter(|ev| matches!(ev.payload, Payload::Vector(_)))
                .map(|ev| ev.space_id.as_str())
                .collect();
            ids.sort_unstable();
            ids.dedup();
            match ids.as_slice() {
                [one] => one.to_string(),
                [] => bail!("trace has no vector events"),
                many => {
                    return Err(UsageError(format!(
                        "several continuous spaces, pick one with --space: {}",
                        many.join(", ")
                    ))
                    .into())
                }
            }
        }
    };
    let mut meta = Vec::new();
    let mut points = Vec::new();
    for e in &execs {
        for ev in e.events.iter().filter(|ev| ev.space_id == space) {
            let Payload::Vector(v) = &ev.payload else {
                bail!("space '{space}' holds tokens, not vectors");
            };
            meta.push((e, ev.step));
            points.push(v.clone());
        }
    }
    if points.is_empty() {
        bail!("no vector events in space '{space}'");
    }
    let q = a.dims as usize;
    let proj = fit_projection(&points, q).with_context(|| format!("projecting space '{space}'"))?;
    let coords: Vec<Vec<f64>> = points.iter().map(|p| proj.apply(p)).collect::<Result<_, _>>()?;
    let text = match a.format {
        CsvFormat::Json => {
            let pts: Vec<_> = meta
                .iter()
                .zip(&coords)
                .map(|((e, step), c)| {
                    json!({"exec_id": e.exec_id, "step": step, "class": e.class_label(), "outcome": e.outcome, "coords": c})
                })
                .collect();
            json_report(&json!({
                "space": space,
                "explained_variance_ratio": proj.explained_variance_ratio,
                "points": pts,
            }))?
        }
        CsvFormat::Csv => {
            let mut header = vec!["exec_id", "step", "space", "class", "outcome", "pc1", "pc2"];
            if q == 3 {
                header.push("pc3");
            }
            let rows: Vec<Vec<String>> = meta
                .iter()
                .zip(&coords)
                .map(|((e, step), c)| {
                    let mut r = vec![
                        e.exec_id.clone(),
                        step.to_string(),
                        space.clone(),
                        e.class_label().unwrap_or_default(),
                        e.outcome.as_str().into(),
                    ];
                    r.extend(c.iter().map(|x| num(*x)));
                    r
                })
                .collect();
            csv_report(&header, &rows)?
        }
    };
    emit(a.out.as_deref(), &text)
}

pub fn synth(c: SynthCommand) -> Result<()> {
    let (args, layered) = match c {
        SynthCommand::Layered(a) => (a, true),
        SynthCommand::Markov(a) => (a, false),
    };
    let text = std::fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let ctx = || format!("parsing spec {}", args.spec.display());
    let trace = if layered {
        let mut spec: LayeredGaussianSpec = serde_json::from_str(&text).with_context(ctx)?;
        spec.seed = args.seed.unwrap_or(spec.seed);
        gen_layered_gaussian(&spec)?
    } else {
        let mut spec: MarkovCorpusSpec = serde_json::from_str(&text).with_context(ctx)?;
        spec.seed = args.seed.unwrap_or(spec.seed);
        gen_markov_corpus(&spec)?
    };
    emit(args.out.as_deref(), &trace)
}
