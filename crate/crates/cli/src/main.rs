use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mel_cli::compare::compare_files;
use mel_cli::config::Precision;
use mel_cli::pipeline::{run_all, run_stage, write_synthetic, Stage, StageOutcome};
use mel_cli::{CliResult, PipelineConfig, Profile};

/// Multilingual entity linking pipeline.
#[derive(Debug, Parser)]
#[command(name = "mel", version)]
struct Args {
    /// TOML file overlaid on the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every stage derives its own from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
    /// Directory that relative paths resolve against.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic KB and documents into the raw input directory.
    GenSynthetic,
    /// Filter the raw KB into the ingested KB file.
    KbIngest,
    /// Extract anchor mentions from raw documents.
    Extract,
    /// Hold out documents and sample the eval set.
    Split,
    /// Train the subword vocabulary on training mentions and KB descriptions.
    Vocab,
    /// Train the dual encoder (phase one when hard negatives are on).
    Train,
    /// Mine balanced hard negatives and run the second training phase.
    Mine,
    /// Encode every KB entity into the retrieval index.
    Index,
    /// Evaluate dense retrieval and the alias-table baseline.
    Eval,
    /// Train the cross-attention reranker.
    RerankTrain,
    /// Rerank the top dual-encoder candidates and evaluate.
    RerankEval,
    /// Every stage in order (mine only with hard negatives on).
    RunAll,
    /// Per-bin differences `b − a` between two report JSON files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(args: &Args) -> CliResult<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(args.profile, path)?,
        None => PipelineConfig::for_profile(args.profile),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.workdir {
        cfg.workdir = dir.clone();
    }
    if let Some(p) = args.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(outcome: &StageOutcome) {
    for w in &outcome.warnings {
        eprintln!("{w}");
    }
    println!("[{}]", outcome.stage.name());
    for n in &outcome.notes {
        println!("{n}");
    }
}

fn run(args: &Args) -> CliResult<()> {
    let stage = match &args.command {
        Command::Compare { a, b, json } => {
            let table = compare_files(a, b)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&table).expect("table serializes"));
            } else {
                print!("{}", table.to_table());
            }
            return Ok(());
        }
        Command::KbIngest => Stage::KbIngest,
        Command::Extract => Stage::Extract,
        Command::Split => Stage::Split,
        Command::Vocab => Stage::Vocab,
        Command::Train => Stage::Train,
        Command::Mine => Stage::Mine,
        Command::Index => Stage::Index,
        Command::Eval => Stage::Eval,
        Command::RerankTrain => Stage::RerankTrain,
        Command::RerankEval => Stage::RerankEval,
        Command::GenSynthetic => {
            let cfg = load_config(args)?;
            std::fs::create_dir_all(&cfg.workdir).map_err(|e| mel_cli::CliError::io(&cfg.workdir, e))?;
            let dir = write_synthetic(&cfg)?;
            println!("synthetic inputs written to {}", dir.display());
            return Ok(());
        }
        Command::RunAll => {
            for outcome in run_all(&load_config(args)?)? {
                report(&outcome);
            }
            return Ok(());
        }
        Command::ShowConfig => {
            let cfg = load_config(args)?;
            print!("{}", toml::to_string(&cfg).map_err(|e| mel_cli::CliError::Config(e.to_string()))?);
            return Ok(());
        }
    };
    report(&run_stage(&load_config(args)?, stage)?);
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            ExitCode::FAILURE
        }
    }
}
