mod cli;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use steexlab_service::error::core_detail;
use steexlab_service::{ErrorDetail, ServiceError, HOME_ENV};

#[derive(Parser)]
#[command(name = "steexlab", version, about = "Semantic-layout counterfactual explanations")]
struct Cli {
    /// Artifact root holding datasets, models, runs, jobs and the registry.
    #[arg(long, env = HOME_ENV, default_value = "steexlab-home", global = true)]
    home: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset generation.
    #[command(subcommand)]
    Dataset(cli::data::DatasetCmd),
    /// Import external image/mask pairs.
    Ingest(cli::data::IngestArgs),
    /// Train a model; optionally register it.
    Train(cli::train::TrainArgs),
    /// Counterfactuals for one or more queries.
    Explain(cli::explain::ExplainArgs),
    /// One counterfactual per region set for a single query.
    SweepRegions(cli::explain::SweepArgs),
    /// Metrics over stored results.
    Evaluate(cli::evaluate::EvaluateArgs),
    /// Full method against its ablations.
    Ablate(cli::evaluate::AblateArgs),
    /// Counterfactual metrics over a range of distance weights.
    LambdaSweep(cli::evaluate::LambdaSweepArgs),
    /// Per-class impact of several classifiers.
    ImpactTable(cli::evaluate::ImpactArgs),
    /// Model registry.
    #[command(subcommand)]
    Models(cli::ModelsCmd),
    /// Run the HTTP service.
    Serve(cli::ServeArgs),
}

fn error_detail(e: &anyhow::Error) -> ErrorDetail {
    if let Some(s) = e.downcast_ref::<ServiceError>() {
        return s.detail();
    }
    if let Some(c) = e.downcast_ref::<steexlab_core::Error>() {
        return core_detail(c);
    }
    ErrorDetail { class: "cli".into(), message: format!("{e:#}"), step: None, trajectory: None }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let home = cli.home;
    let outcome = match cli.command {
        Command::Dataset(c) => cli::data::dataset(&home, c),
        Command::Ingest(a) => cli::data::ingest(&home, a),
        Command::Train(a) => cli::train::train(&home, a),
        Command::Explain(a) => cli::explain::explain(&home, a),
        Command::SweepRegions(a) => cli::explain::sweep(&home, a),
        Command::Evaluate(a) => cli::evaluate::evaluate(&home, a),
        Command::Ablate(a) => cli::evaluate::ablate(&home, a),
        Command::LambdaSweep(a) => cli::evaluate::lambda_sweep(&home, a),
        Command::ImpactTable(a) => cli::evaluate::impact(&home, a),
        Command::Models(c) => cli::models(&home, c),
        Command::Serve(a) => cli::serve(&home, a),
    };
    match outcome {
        Ok(out) => {
            if let Some(v) = out {
                println!("{}", serde_json::to_string_pretty(&v).expect("output serializes"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let detail = error_detail(&e);
            eprintln!("{}", serde_json::json!({ "error": detail }));
            ExitCode::FAILURE
        }
    }
}
