use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tsap_cli::config::{load_config, preset, to_toml};
use tsap_cli::run::Run;
use tsap_cli::{CliError, Result};
use tsap_core::pipeline::ModelSpec;

/// Time-scale augmented pretraining experiments on synthetic recordings.
///
/// Every command works on a run directory. Pass `--config` to (re)snapshot a
/// config into it; otherwise the directory's `config.toml` is used. Finished
/// stages are skipped when their inputs and outputs are unchanged.
#[derive(Debug, Parser)]
#[command(name = "tsap", version)]
struct Cli {
    /// Suppress progress messages on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Run directory.
    #[arg(short, long)]
    run: PathBuf,
    /// TOML config to snapshot into the run directory.
    #[arg(short, long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print a complete config with every default filled in.
    PrintConfig {
        /// default, smoke or acceptance.
        #[arg(long, default_value = "default")]
        preset: String,
    },
    /// Generate the synthetic corpus.
    Generate {
        #[command(flatten)]
        args: RunArgs,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain models (all configured models unless --model is given).
    Pretrain {
        #[command(flatten)]
        args: RunArgs,
        /// e.g. fixed-2s or tsap; repeatable.
        #[arg(long)]
        model: Vec<String>,
    },
    /// Finetune and test one (model, task, length, subject, seed) cell.
    Finetune {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long)]
        model: String,
        /// Defaults to the first configured task.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        length: f64,
        #[arg(long)]
        subject: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finetune every model on every cell and merge results.tsv.
    CrossEval {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Cluster temporal and CLS embeddings by interval length.
    Analyze {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Summarize a finished run's results.tsv.
    Report {
        /// Run directory.
        #[arg(short, long)]
        run: PathBuf,
        /// Print the machine-readable summary instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// All stages: generate, pretrain, cross-eval, analyze, report.
    Run {
        #[command(flatten)]
        args: RunArgs,
    },
}

fn open(args: &RunArgs, quiet: bool) -> Result<Run> {
    let cfg = args.config.as_deref().map(load_config).transpose()?;
    let mut run = Run::open(&args.run, cfg)?;
    run.quiet = quiet;
    Ok(run)
}

fn parse_model(s: &str) -> Result<ModelSpec> {
    s.parse().map_err(|e: tsap_core::pipeline::PipelineError| CliError::Validation(e.to_string()))
}

fn execute(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::PrintConfig { preset: name } => {
            print!("{}", to_toml(&preset(&name)?));
        }
        Command::Generate { args, seed } => {
            let mut cfg = match (&args.config, seed) {
                (Some(p), _) => Some(load_config(p)?),
                (None, Some(_)) => Some(load_config(&args.run.join(tsap_cli::run::CONFIG_FILE))?),
                (None, None) => None,
            };
            if let (Some(c), Some(s)) = (cfg.as_mut(), seed) {
                c.seed = s;
            }
            let mut run = Run::open(&args.run, cfg)?;
            run.quiet = quiet;
            run.generate()?;
            for a in &run.manifest.stages["generate"].artifacts {
                println!("{}  {}", a.sha256, a.path);
            }
        }
        Command::Pretrain { args, model } => {
            let mut run = open(&args, quiet)?;
            let specs = if model.is_empty() {
                run.cfg.models()
            } else {
                let specs = model.iter().map(|m| parse_model(m)).collect::<Result<Vec<_>>>()?;
                if let Some(s) = specs.iter().find(|s| !run.cfg.models().contains(s)) {
                    return Err(CliError::Validation(format!("model {s} is not configured")));
                }
                specs
            };
            for s in specs {
                run.pretrain(s)?;
            }
        }
        Command::Finetune {
            args,
            model,
            task,
            length,
            subject,
            seed,
        } => {
            let mut run = open(&args, quiet)?;
            let spec = parse_model(&model)?;
            let task = task.unwrap_or_else(|| run.cfg.finetune.tasks[0].clone());
            let auc = run.finetune_cell(spec, &task, length, subject, seed)?;
            println!("{spec}\t{task}\t{length}\t{subject}\t{seed}\t{auc}");
        }
        Command::CrossEval { args } => {
            let mut run = open(&args, quiet)?;
            run.cross_eval_all()?;
            println!("{}", args.run.join(tsap_cli::run::RESULTS_FILE).display());
        }
        Command::Analyze { args } => {
            let mut run = open(&args, quiet)?;
            run.analyze()?;
            print!("{}", std::fs::read_to_string(args.run.join("analysis/summary.tsv")).unwrap_or_default());
        }
        Command::Report { run, json } => {
            let mut r = Run::open(&run, None)?;
            r.quiet = quiet;
            let text = r.report()?;
            if json {
                print!("{}", std::fs::read_to_string(run.join("report.json")).unwrap_or_default());
            } else {
                print!("{text}");
            }
        }
        Command::Run { args } => {
            let mut run = open(&args, quiet)?;
            let text = run.run_all()?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tsap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
