//! Semantic flow analysis for ML-based systems.
//!
//! Execution traces record, step by step, where a system sits in one or
//! more latent spaces (layer activations, agent tool calls, control
//! locations). This crate fits per-space embeddings and clusterings, folds
//! executions into semantic flow graphs, and runs dynamic analyses on top:
//! ε/soft coverage, surprise adequacy, spectrum-based fault localization
//! and outcome prediction from (partial) paths.

pub mod aggregation;
pub mod coverage;
pub mod embedding;
pub mod model;
pub mod predict;
pub mod sbfl;
pub mod sfg;
pub mod surprise;
pub mod synth;
pub mod trace;

pub use aggregation::{Assignment, Clustering, EpsilonPolicy};
pub use coverage::{epsilon_coverage, soft_coverage, CoverageReport, SoftCoverageReport};
pub use embedding::{Projection, SemanticState, StatePoint, Vocabulary};
pub use model::{fit_model, LatentModel, ModelFile};
pub use predict::{early_termination, fit_outcome_model, score_path, OutcomeModel, Prediction};
pub use sbfl::{collect_spectrum, rank, Formula, Spectrum};
pub use sfg::{build_sacfg, build_sfg, to_dot, NodeKey, SemanticFlowGraph};
pub use surprise::{execution_surprise, SurpriseOptions, SurpriseScore};
pub use synth::{gen_layered_gaussian, gen_markov_corpus, LayeredGaussianSpec, MarkovCorpusSpec};
pub use trace::{parse_trace, validate, Execution, Outcome, SpaceConfig, TraceEvent};
