use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clusterfx_cli::config::{self, parse_enum, split_list};
use clusterfx_cli::{AnalyzeConfig, CliError, SimulateConfig};

/// Treatment-effect estimation for cluster-randomized experiments.
#[derive(Parser)]
#[command(name = "clusterfx", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a treatment effect from an individual-level CSV file.
    Analyze(AnalyzeArgs),
    /// Run a Monte-Carlo study and write a metrics CSV.
    Simulate(SimulateArgs),
    /// Write one simulated dataset as an individual-level CSV.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// TOML config, or a JSON result document to rerun.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    /// unadjusted, gee-g, lmm-g, eff-pm or eff-ml.
    #[arg(long)]
    estimator: Option<String>,
    /// cluster or individual.
    #[arg(long)]
    estimand: Option<String>,
    /// difference, ratio or odds-ratio.
    #[arg(long)]
    measure: Option<String>,
    /// source, enrolled or unknown-n.
    #[arg(long)]
    population: Option<String>,
    #[arg(long)]
    pi: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated cluster-level covariate columns.
    #[arg(long)]
    cluster_covs: Option<String>,
    /// Comma-separated individual-level covariate columns.
    #[arg(long)]
    indiv_covs: Option<String>,
    /// Source population size column.
    #[arg(long)]
    n_col: Option<String>,
    #[arg(long)]
    cluster_col: Option<String>,
    #[arg(long)]
    treatment_col: Option<String>,
    #[arg(long)]
    outcome_col: Option<String>,
    #[arg(long)]
    ci_level: Option<f64>,
    /// Result JSON path (stdout when absent).
    #[arg(long)]
    out: Option<String>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// continuous or binary.
    #[arg(long)]
    experiment: Option<String>,
    /// 1-4.
    #[arg(long)]
    scenario: Option<u8>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Seeds both the data streams and cross-fitting.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated estimators.
    #[arg(long)]
    estimators: Option<String>,
    /// Comma-separated estimands (cluster, individual).
    #[arg(long)]
    levels: Option<String>,
    /// Metrics CSV path (stdout when absent); a JSON manifest is written
    /// next to it.
    #[arg(long)]
    out: Option<String>,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "continuous")]
    experiment: String,
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    #[arg(long)]
    out: Option<String>,
}

fn analyze_config(a: &AnalyzeArgs) -> Result<AnalyzeConfig, CliError> {
    let mut cfg: AnalyzeConfig = match &a.config {
        Some(p) => config::load(p)?,
        None => AnalyzeConfig::default(),
    };
    if let Some(v) = &a.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = &a.estimator {
        cfg.estimator = parse_enum("estimator", v)?;
    }
    if let Some(v) = &a.estimand {
        cfg.estimand.level = parse_enum("estimand", v)?;
    }
    if let Some(v) = &a.measure {
        cfg.estimand.measure = parse_enum("measure", v)?;
    }
    if let Some(v) = &a.population {
        cfg.estimand.population = parse_enum("population", v)?;
    }
    if let Some(v) = a.pi {
        cfg.pi = v;
    }
    if let Some(v) = a.folds {
        cfg.settings.folds = v;
    }
    if let Some(v) = a.seed {
        cfg.settings.seed = v;
    }
    if let Some(v) = a.ci_level {
        cfg.settings.ci_level = v;
    }
    if let Some(v) = &a.cluster_covs {
        cfg.columns.cluster_covariates = split_list(v);
    }
    if let Some(v) = &a.indiv_covs {
        cfg.columns.indiv_covariates = split_list(v);
    }
    if let Some(v) = &a.n_col {
        cfg.columns.source_size = Some(v.clone());
    }
    if let Some(v) = &a.cluster_col {
        cfg.columns.cluster_id = v.clone();
    }
    if let Some(v) = &a.treatment_col {
        cfg.columns.treatment = v.clone();
    }
    if let Some(v) = &a.outcome_col {
        cfg.columns.outcome = v.clone();
    }
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    Ok(cfg)
}

fn simulate_config(a: &SimulateArgs) -> Result<SimulateConfig, CliError> {
    let mut cfg: SimulateConfig = match &a.config {
        Some(p) => config::load(p)?,
        None => SimulateConfig::default(),
    };
    if let Some(v) = &a.experiment {
        cfg.experiment = parse_enum("experiment", v)?;
    }
    if let Some(v) = a.scenario {
        cfg.scenario = v;
    }
    if let Some(v) = a.replicates {
        cfg.replicates = v;
    }
    if a.m.is_some() {
        cfg.m = a.m;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
        cfg.settings.seed = v;
    }
    if let Some(v) = &a.estimators {
        cfg.estimators = split_list(v).iter().map(|s| parse_enum("estimators", s)).collect::<Result<_, _>>()?;
    }
    if let Some(v) = &a.levels {
        cfg.levels = split_list(v).iter().map(|s| parse_enum("levels", s)).collect::<Result<_, _>>()?;
    }
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze(a) => {
            let cfg = analyze_config(&a)?;
            let out = clusterfx_cli::analyze(cfg, a.workers)?;
            for w in &out.result.warnings {
                eprintln!("warning: {w}");
            }
            match &out.config.out {
                Some(path) => {
                    clusterfx_cli::write_file(path, &out.document)?;
                    let r = &out.result;
                    println!(
                        "{}: estimate {:.6}, SE {:.6}, {:.0}% CI [{:.6}, {:.6}], dof {}",
                        r.estimator.label(),
                        r.delta,
                        r.se,
                        100.0 * r.ci_level,
                        r.ci_low,
                        r.ci_high,
                        r.dof
                    );
                }
                None => print!("{}", out.document),
            }
        }
        Command::Simulate(a) => {
            let cfg = simulate_config(&a)?;
            let out_path = cfg.out.clone();
            let out = clusterfx_cli::simulate(cfg, a.workers)?;
            match out_path {
                Some(path) => {
                    clusterfx_cli::write_file(&path, &out.csv)?;
                    clusterfx_cli::write_file(&clusterfx_cli::manifest_path(&path), &out.document)?;
                    print!("{}", out.summary);
                }
                None => {
                    print!("{}", out.csv);
                    eprint!("{}", out.summary);
                }
            }
        }
        Command::Generate(a) => {
            let experiment = parse_enum("experiment", &a.experiment)?;
            let csv = clusterfx_cli::generate_csv(experiment, a.scenario, a.m, a.seed, a.replicate)?;
            match &a.out {
                Some(path) => clusterfx_cli::write_file(path, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
