use std::path::PathBuf;
use std::process::ExitCode;

use calsfda::cli::{self, PipelineEnd, RunConfig, Split};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "calsfda",
    version,
    about = "Calibration-guided source-free adaptation on synthetic segmentation data"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set source.alpha=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source and target dataset splits.
    Generate {
        /// Replace existing data.
        #[arg(long)]
        force: bool,
    },
    /// Train the source model, saving every epoch.
    TrainSource,
    /// Pick the source epoch with the best validation calibration.
    SelectSource,
    /// Train the calibration value net on the frozen selected model.
    TrainValuenet,
    /// Self-train the selected model on unlabeled target images.
    Adapt,
    /// Score a checkpoint on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// source_train, source_val, target_train or target_test.
        #[arg(long, default_value = "target_test")]
        split: String,
    },
    /// Run every stage and write summary.csv.
    Run {
        #[arg(long)]
        force: bool,
        /// Stop after source selection.
        #[arg(long)]
        source_only: bool,
    },
    /// Aggregate finished runs under a directory.
    Report {
        runs: PathBuf,
        /// Defaults to `<runs>/report`.
        #[arg(long = "report-dir")]
        report_dir: Option<PathBuf>,
    },
    /// Print the resolved config.
    ShowConfig,
}

fn resolve(args: &ConfigArgs) -> calsfda::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| calsfda::Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> calsfda::Result<()> {
    let cfg = resolve(&cli.config)?;
    match cli.command {
        Command::Generate { force } => cli::cmd_generate(&cfg, force),
        Command::TrainSource => cli::cmd_train_source(&cfg),
        Command::SelectSource => {
            let sel = cli::cmd_select_source(&cfg)?;
            println!("selected epoch {} (score {:.6})", sel.epoch, sel.stats.score());
            Ok(())
        }
        Command::TrainValuenet => cli::cmd_train_valuenet(&cfg),
        Command::Adapt => cli::cmd_adapt(&cfg),
        Command::Evaluate { checkpoint, split } => {
            let s = cli::cmd_evaluate(&cfg, &checkpoint, split.parse::<Split>()?)?;
            println!("mIoU {:.4}  ECE {:.4}", s.miou.mean, s.ece);
            Ok(())
        }
        Command::Run { force, source_only } => {
            let end = if source_only {
                PipelineEnd::SourceOnly
            } else {
                PipelineEnd::Full
            };
            print!("{}", cli::cmd_run(&cfg, force, end)?.to_csv());
            Ok(())
        }
        Command::Report { runs, report_dir } => {
            let out = report_dir.unwrap_or_else(|| runs.join("report"));
            print!("{}", cli::cmd_report(&runs, &out)?.to_markdown());
            Ok(())
        }
        Command::ShowConfig => {
            print!("{}", cfg.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
