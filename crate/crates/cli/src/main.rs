//! `cf-audit`: batch driver for counterfactual triage bias audits.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cf_audit_core::profile::Profile;
use cf_audit_core::AuditError;
use clap::{Parser, Subcommand};

use crate::commands::*;
use crate::config::{read_toml, Resolved, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "cf-audit", version, about = "Counterfactual sex/gender bias audits for triage predictors")]
struct Cli {
    /// Seed for every random step (bootstrap, splits, synthesis, training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset preset: bordeaux or mimic.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// Directory for relative output paths.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Run configuration (TOML): profile, seed, filter, bootstrap, generation, report.
    #[arg(long, global = true)]
    run_config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Apply cohort filters and the gender lexicon screen.
    Filter(FilterArgs),
    /// Label-stratified train/test split.
    Split(SplitArgs),
    /// Generate counterfactual pairs through a chat-completion service.
    Pairs(PairsArgs),
    /// Score every pair variant with a predictor binding.
    Predict(PredictArgs),
    /// Train the bag-of-words baseline predictor.
    Train(TrainArgs),
    /// Weighted kappa of a predictor against reference labels.
    Agreement(AgreementArgs),
    /// Paired bias metrics with bootstrap intervals.
    Audit(AuditArgs),
    /// Per-label discordance, odds ratios and p-values.
    Stratify(StratifyArgs),
    /// Synthetic pairs and predictions with a known injected effect.
    Synth(SynthArgs),
    /// Project a differential onto annual visit counts.
    Project(ProjectArgs),
    /// Compare the net effects of two audits of the same pairs.
    Compare(CompareArgs),
    /// Render audit and stratum results as JSON, markdown and plot data.
    Report(ReportArgs),
}

fn exit_code(e: &AuditError) -> u8 {
    match e {
        AuditError::Config(_) => 2,
        AuditError::Service(_) => 4,
        AuditError::Io { .. } => 5,
        AuditError::Record { .. }
        | AuditError::LabelOutOfScale { .. }
        | AuditError::Parse(_)
        | AuditError::Prediction { .. }
        | AuditError::Undefined(_)
        | AuditError::IndexSetMismatch(_)
        | AuditError::Json(_) => 3,
    }
}

fn run(cli: Cli) -> cf_audit_core::Result<()> {
    let file = match &cli.run_config {
        Some(p) => read_toml::<RunConfig>(p)?,
        None => RunConfig::default(),
    };
    let ctx = Resolved::new(file, cli.profile, cli.seed, cli.out_dir);
    match cli.command {
        Command::Filter(a) => filter(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::Pairs(a) => pairs(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Agreement(a) => agreement(&ctx, a),
        Command::Audit(a) => audit(&ctx, a),
        Command::Stratify(a) => stratify(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Project(a) => project(&ctx, a),
        Command::Compare(a) => compare(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cf-audit: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
