use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod output;

/// Semantic flow graph analysis of ML-system execution traces.
#[derive(Parser, Debug)]
#[command(name = "semflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check traces against the format and (optionally) a space config.
    Validate(ValidateArgs),
    /// Fit embeddings and clusterings and build the reference SFG.
    Build(BuildArgs),
    /// Export an SFG as DOT or JSON.
    Graph(GraphArgs),
    /// ε-coverage (or Gaussian soft coverage) of the model's clusters.
    Coverage(CoverageArgs),
    /// Per-execution surprise adequacy against the model's reference states.
    Surprise(SurpriseArgs),
    /// Rank SFG nodes and edges by suspiciousness.
    Localize(LocalizeArgs),
    /// Predict pass/fail from (partial) paths.
    Predict(PredictArgs),
    /// 2D/3D PCA coordinates of one continuous space.
    Project(ProjectArgs),
    /// Generate synthetic traces.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TableFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CsvFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GraphFormat {
    Dot,
    Json,
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x >= 0.0 => Ok(x),
        _ => Err(format!("expected a non-negative number, got '{s}'")),
    }
}

fn positive_finite(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
        _ => Err(format!("expected a positive finite number, got '{s}'")),
    }
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Trace file (repeatable).
    #[arg(long = "trace", required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub spaces: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: TableFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long = "trace", required = true)]
    pub traces: Vec<PathBuf>,
    /// Space config; inferred from the traces when omitted.
    #[arg(long)]
    pub spaces: Option<PathBuf>,
    #[arg(long, env = "SEMFLOW_SEED")]
    pub seed: Option<u64>,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GraphArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Build the graph from these traces instead of the reference graph.
    #[arg(long = "trace")]
    pub traces: Vec<PathBuf>,
    /// Require a control space (semantically augmented CFG).
    #[arg(long)]
    pub sacfg: bool,
    /// Global ε overriding per-cluster radii.
    #[arg(long, value_parser = non_negative, requires = "traces")]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum, default_value = "dot")]
    pub format: GraphFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SoftAgg {
    Max,
    Mean,
}

#[derive(Args, Debug)]
pub struct CoverageArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "trace", required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long, value_parser = non_negative, conflicts_with = "soft")]
    pub epsilon: Option<f64>,
    /// Gaussian soft coverage instead of ε-coverage.
    #[arg(long, requires = "sigma")]
    pub soft: bool,
    #[arg(long, value_parser = positive_finite, requires = "soft")]
    pub sigma: Option<f64>,
    #[arg(long = "soft-agg", value_enum, default_value = "max", requires = "soft")]
    pub soft_agg: SoftAgg,
    #[arg(long, value_enum, default_value = "text")]
    pub format: TableFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Method {
    Dsa,
    Lsa,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Labels {
    Cluster,
    Class,
}

#[derive(Args, Debug)]
pub struct SurpriseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "trace", required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "dsa")]
    pub method: Method,
    #[arg(long, value_enum, default_value = "max")]
    pub aggregation: SoftAgg,
    /// Where per-state labels come from.
    #[arg(long, value_enum, default_value = "cluster")]
    pub labels: Labels,
    /// Fixed LSA bandwidth; Scott's rule per label when omitted.
    #[arg(long, value_parser = positive_finite)]
    pub bandwidth: Option<f64>,
    #[arg(long, value_parser = non_negative)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: CsvFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormulaArg {
    Ochiai,
    Tarantula,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Elements {
    All,
    Nodes,
    Edges,
}

#[derive(Args, Debug)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled traces to localize over; the reference graph when omitted.
    #[arg(long = "trace")]
    pub traces: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "ochiai")]
    pub formula: FormulaArg,
    #[arg(long, value_enum, default_value = "all")]
    pub elements: Elements,
    #[arg(long, value_parser = non_negative, requires = "traces")]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: CsvFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Model whose reference graph supplies the labeled training paths.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "trace", required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long, value_parser = positive_finite, default_value = "1")]
    pub alpha: f64,
    /// Score only the first N events of each execution.
    #[arg(long = "prefix-steps")]
    pub prefix_steps: Option<usize>,
    /// Early-termination threshold; adds a continue/abort column.
    #[arg(long, value_parser = non_negative)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = non_negative)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: CsvFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long = "trace", required = true)]
    pub traces: Vec<PathBuf>,
    /// Continuous space to project; optional when there is only one.
    #[arg(long)]
    pub space: Option<String>,
    #[arg(long, default_value = "2", value_parser = clap::value_parser!(u8).range(2..=3))]
    pub dims: u8,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: CsvFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum SynthCommand {
    /// Class-separated Gaussian layer activations.
    Layered(SynthArgs),
    /// Token paths from a pass chain and a fail chain.
    Markov(SynthArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON generator spec.
    #[arg(long)]
    pub spec: PathBuf,
    /// Overrides the seed given in the generator file.
    #[arg(long, env = "SEMFLOW_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(a) => commands::validate(a),
        Command::Build(a) => commands::build(a),
        Command::Graph(a) => commands::graph(a),
        Command::Coverage(a) => commands::coverage(a),
        Command::Surprise(a) => commands::surprise(a),
        Command::Localize(a) => commands::localize(a),
        Command::Predict(a) => commands::predict(a),
        Command::Project(a) => commands::project(a),
        Command::Synth(c) => commands::synth(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
