//! `genkit` command-line front end.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genkit::bench::{run_bench, BenchConfig, EstimatorId, Pipeline, DEFAULT_STRATA};
use genkit::dgp::{generate, Scenario, ScenarioConfig};
use genkit::estimators::NestedTarget;
use genkit::nuisance::MomentSpec;
use genkit::scm::{
    backdoor_admissible_sets, find_transport, parse_graph_dsl, transport_formula, TransportVerdict,
};
use genkit::variance::stratified_bootstrap;
use genkit::{load_dataset, Design, Error, Schema, TrialPropensity};
use serde::Serialize;

const DEFAULT_SEED: u64 = 1;

#[derive(Parser)]
#[command(
    name = "genkit",
    version,
    about = "Generalize trial treatment effects to a target population"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo benchmark on a simulation scenario.
    Simulate(SimulateArgs),
    /// Estimate the target-population ATE from a CSV file.
    Estimate(EstimateArgs),
    /// Check transportability on a selection diagram.
    Identify(IdentifyArgs),
    /// Write one simulated dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_scenario, default_value = "s1")]
    scenario: Scenario,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    #[arg(long, env = "GENKIT_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Comma-separated estimator ids.
    #[arg(long)]
    estimators: Option<String>,
    /// Number of strata for a bare `strat` id and the default line-up.
    #[arg(long, default_value_t = DEFAULT_STRATA as u64, value_parser = clap::value_parser!(u64).range(2..))]
    strata: u64,
    /// Calibration moments, e.g. `x` or `x,x^2`.
    #[arg(long, value_parser = parse_moments, default_value = "x")]
    moments: MomentSpec,
    #[arg(long)]
    superpopulation: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Print JSON instead of CSV.
    #[arg(long)]
    json: bool,
    /// Write CSV here and JSON next to it.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Nested,
    NonNested,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Cohort,
    NonRandomized,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Overrides the design inferred from the S column.
    #[arg(long, value_enum)]
    design: Option<DesignArg>,
    /// Comma-separated estimator ids; defaults to the full line-up for the
    /// design.
    #[arg(long)]
    estimator: Option<String>,
    /// Bootstrap replicates; 0 skips the interval.
    #[arg(long, default_value_t = 100, value_parser = parse_bootstrap)]
    bootstrap: usize,
    #[arg(long, env = "GENKIT_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STRATA as u64, value_parser = clap::value_parser!(u64).range(2..))]
    strata: u64,
    #[arg(long, value_parser = parse_moments, default_value = "x")]
    moments: MomentSpec,
    /// Known trial treatment probability.
    #[arg(long, default_value_t = 0.5)]
    e1: f64,
    /// Averaging population for nested designs.
    #[arg(long, value_enum, default_value = "cohort")]
    target: TargetArg,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct IdentifyArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Defaults to the `treatment` annotation in the graph file.
    #[arg(long)]
    treatment: Option<String>,
    /// Defaults to the `outcome` annotation in the graph file.
    #[arg(long)]
    outcome: Option<String>,
    /// Adjustment set; searched for when omitted.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    set: Option<Vec<String>>,
    /// Also list backdoor adjustment sets.
    #[arg(long)]
    backdoor: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_scenario, default_value = "s1")]
    scenario: Scenario,
    #[arg(long, env = "GENKIT_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    #[arg(long)]
    superpopulation: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_moments(s: &str) -> Result<MomentSpec, String> {
    MomentSpec::parse(s).map_err(|e| e.to_string())
}

fn parse_bootstrap(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(1) => Err("needs 0 (off) or at least 2 replicates".into()),
        Ok(b) => Ok(b),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_estimators(list: &str, strata: u64) -> Result<Vec<EstimatorId>, Error> {
    list.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            if t == "strat" {
                Ok(EstimatorId::Strat(strata as usize))
            } else {
                t.parse()
            }
        })
        .collect()
}

fn requested(list: Option<&str>, design: Design, strata: u64) -> Result<Vec<EstimatorId>, Error> {
    match list {
        Some(list) => parse_estimators(list, strata),
        None if design == Design::Nested => Ok(EstimatorId::nested_all()),
        None => Ok(EstimatorId::standard()
            .into_iter()
            .map(|id| {
                if let EstimatorId::Strat(_) = id {
                    EstimatorId::Strat(strata as usize)
                } else {
                    id
                }
            })
            .collect()),
    }
}

enum Failure {
    Usage(String),
    Compute(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let usage = matches!(
            e,
            Error::MissingColumn(_)
                | Error::NonBinaryTreatment { .. }
                | Error::NonFiniteCovariate { .. }
                | Error::MissingOutcomeInTrial { .. }
                | Error::MissingTreatmentInTrial { .. }
                | Error::BadSelectionIndicator { .. }
                | Error::EmptyArm(_)
                | Error::EmptyTargetSample
                | Error::NoCovariates
                | Error::Csv(_)
                | Error::Io(_)
                | Error::BadMomentSpec(_)
                | Error::UnknownScenario(_)
                | Error::UnknownEstimator(_)
                | Error::CycleDetected(_)
                | Error::UnknownNode(_)
                | Error::DuplicateEdge(..)
                | Error::Parse { .. }
                | Error::NoSelectionNode
                | Error::MissingRole(_)
        );
        if usage {
            Failure::Usage(e.to_string())
        } else {
            Failure::Compute(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Compute(format!("json: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Compute(format!("csv: {e}"))
    }
}

fn create(path: &Path) -> Result<File, Failure> {
    File::create(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(out: impl Write, value: &T) -> Result<(), Failure> {
    let mut out = out;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<ExitCode, Failure> {
    let design = if args.scenario == Scenario::Nested {
        Design::Nested
    } else {
        Design::NonNested
    };
    let estimators = requested(args.estimators.as_deref(), design, args.strata)?;
    let estimators = estimators
        .into_iter()
        .map(|id| id.for_design(design))
        .collect();
    let mut cfg = BenchConfig::new(args.scenario, args.reps as usize, args.seed, estimators);
    cfg.moments = args.moments;
    cfg.superpopulation = args.superpopulation;
    cfg.m = args.m;
    let report = run_bench(&cfg)?;
    match &args.output {
        Some(path) => {
            report.write_csv(create(path)?)?;
            write_json(create(&path.with_extension("json"))?, &report)?;
        }
        None if args.json => write_json(io::stdout().lock(), &report)?,
        None => report.write_csv(io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EstimateRow {
    estimator: String,
    value: f64,
    lower: Option<f64>,
    upper: Option<f64>,
    b: usize,
    seed: u64,
    failures: usize,
}

fn estimate(args: EstimateArgs) -> Result<ExitCode, Failure> {
    let schema = Schema {
        design: args.design.map(|d| match d {
            DesignArg::Nested => Design::Nested,
            DesignArg::NonNested => Design::NonNested,
        }),
        e1: TrialPropensity::Constant(args.e1),
        ..Schema::default()
    };
    let ds = load_dataset(&args.data, &schema)?;
    let target = match args.target {
        TargetArg::Cohort => NestedTarget::Cohort,
        TargetArg::NonRandomized => NestedTarget::NonRandomized,
    };
    let ids: Vec<EstimatorId> = requested(args.estimator.as_deref(), ds.design(), args.strata)?
        .into_iter()
        .map(|id| id.for_design(ds.design()))
        .collect();
    if ids.is_empty() {
        return Err(Failure::Usage("no estimators requested".into()));
    }
    let pipe = Pipeline::new(&ds)
        .moments(args.moments.clone())
        .nested_target(target);
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let row = if args.bootstrap == 0 {
            let est = pipe.estimate(id)?;
            EstimateRow {
                estimator: id.id(),
                value: est.value,
                lower: None,
                upper: None,
                b: 0,
                seed: args.seed,
                failures: 0,
            }
        } else {
            let f = |d: &genkit::CombinedDataset| {
                Pipeline::new(d)
                    .moments(args.moments.clone())
                    .nested_target(target)
                    .estimate(id)
                    .map(|e| e.value)
            };
            let ci = stratified_bootstrap(&ds, f, args.bootstrap, args.seed)?;
            EstimateRow {
                estimator: id.id(),
                value: ci.point,
                lower: Some(ci.lower),
                upper: Some(ci.upper),
                b: ci.b,
                seed: ci.seed,
                failures: ci.failures,
            }
        };
        rows.push(row);
    }
    let out: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(create(path)?),
        None => Box::new(io::stdout().lock()),
    };
    if args.json {
        write_json(out, &rows)?;
    } else {
        let mut w = csv::Writer::from_writer(out);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct IdentifyOutput {
    #[serde(flatten)]
    verdict: TransportVerdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    backdoor_sets: Option<Vec<Vec<String>>>,
}

fn identify(args: IdentifyArgs) -> Result<ExitCode, Failure> {
    let text = std::fs::read_to_string(&args.graph)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.graph.display())))?;
    let d = parse_graph_dsl(&text)?;
    let treatment = match args.treatment.as_deref().or(d.treatment()) {
        Some(t) => t.to_string(),
        None => return Err(Error::MissingRole("treatment").into()),
    };
    let outcome = match args.outcome.as_deref().or(d.outcome()) {
        Some(y) => y.to_string(),
        None => return Err(Error::MissingRole("outcome").into()),
    };
    if d.selection_has_parents() {
        eprintln!(
            "warning: the selection node has parents; the check covers population differences only"
        );
    }
    let verdict = match &args.set {
        Some(set) => {
            let set: Vec<&str> = set
                .iter()
                .map(String::as_str)
                .filter(|s| !s.is_empty())
                .collect();
            transport_formula(&d, &treatment, &outcome, &set)?
        }
        None => find_transport(&d, &treatment, &outcome, None)?,
    };
    let backdoor_sets = if args.backdoor {
        Some(backdoor_admissible_sets(&d, &treatment, &outcome, None)?)
    } else {
        None
    };
    let code = verdict.status.exit_code();
    let mut out = io::stdout().lock();
    if args.json {
        write_json(
            out,
            &IdentifyOutput {
                verdict,
                backdoor_sets,
            },
        )?;
    } else {
        writeln!(out, "{verdict}")?;
        for set in backdoor_sets.iter().flatten() {
            writeln!(out, "backdoor: {{{}}}", set.join(", "))?;
        }
    }
    Ok(ExitCode::from(code as u8))
}

fn generate_cmd(args: GenerateArgs) -> Result<ExitCode, Failure> {
    let mut cfg = ScenarioConfig::new(args.scenario, args.seed).replicate(args.replicate);
    if let Some(s) = args.superpopulation {
        cfg.superpopulation = s;
    }
    if let Some(m) = args.m {
        cfg.m = m;
    }
    let ds = generate(&cfg)?;
    match &args.output {
        Some(path) => ds.write_csv(create(path)?)?,
        None => ds.write_csv(io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Identify(a) => identify(a),
        Command::Generate(a) => generate_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Compute(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
