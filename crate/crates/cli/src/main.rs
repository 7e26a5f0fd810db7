use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvbabel_cli::commands::{self, or_run, AdapterInit, Baseline, EvalMode};
use kvbabel_cli::config::{resolve, ExperimentConfig, FlagTarget, Recipe, TrainFlags};
use kvbabel_cli::report::report;
use kvbabel_cli::run::RunDir;

/// Train and evaluate cache translators between toy language models.
#[derive(Parser)]
#[command(name = "kvbabel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run directory; created if missing.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum)]
    recipe: Option<Recipe>,
    /// JSON config overlay. Defaults to the base run's config.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding pretrained model checkpoints (default: --run).
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    embed_dim_factor: Option<f64>,
    #[arg(long)]
    shared_dim: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the recipe's base models.
    Pretrain(Common),
    /// Train adapter pairs, or a baseline, over every pool path.
    TrainTranslator {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Add the newcomer to a trained pool with incumbents frozen.
    Extend {
        #[command(flatten)]
        common: Common,
        /// Run holding the incumbent adapters (default: --run).
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Meta-train adapters for soft-prompt portability.
    Meta {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pretrained")]
        adapters: AdapterInit,
        /// Update only the into-shared adapters.
        #[arg(long)]
        into_only: bool,
    },
    /// Evaluate every path under one translation mode.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "translator")]
        mode: EvalMode,
    },
    /// Gather run directories into CSV tables and plot data.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory (default: <first run>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config(c: &Common, target: FlagTarget) -> kvbabel::Result<ExperimentConfig> {
    let fallback = c.base.as_ref().unwrap_or(&c.run).join("config.json");
    let file = c.config.clone().or_else(|| fallback.exists().then_some(fallback));
    let mut cfg = resolve(c.recipe, file.as_deref(), &c.train, target)?;
    if let Some(f) = c.embed_dim_factor {
        cfg.translator.embed_dim_factor = f;
    }
    if let Some(q) = c.shared_dim {
        cfg.translator.shared_dim = q;
    }
    Ok(cfg)
}

fn start(c: &Common, target: FlagTarget) -> kvbabel::Result<(ExperimentConfig, RunDir, PathBuf)> {
    let cfg = config(c, target)?;
    let run = RunDir::begin(&c.run, &cfg)?;
    let base = or_run(&c.base, &c.run);
    Ok((cfg, run, base))
}

fn print_json<T: serde::Serialize>(v: &T) -> kvbabel::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cli: Cli) -> kvbabel::Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let (cfg, run, base) = start(&c, FlagTarget::Pretrain)?;
            let hashes = commands::pretrain(&cfg, &run, &base)?;
            for h in hashes {
                println!("checkpoint {h:016x}");
            }
        }
        Command::TrainTranslator { common, baseline } => {
            let (cfg, run, base) = start(&common, FlagTarget::Translator)?;
            print_json(&commands::train_translator(&cfg, &run, &base, baseline)?)?;
        }
        Command::Extend { common, pool } => {
            let (cfg, run, base) = start(&common, FlagTarget::Translator)?;
            let pool = or_run(&pool, &common.run);
            print_json(&commands::extend(&cfg, &run, &base, &pool)?)?;
        }
        Command::Meta {
            common,
            pool,
            adapters,
            into_only,
        } => {
            let mut cfg = config(&common, FlagTarget::Translator)?;
            cfg.portability.meta.into_only |= into_only;
            let run = RunDir::begin(&common.run, &cfg)?;
            let base = or_run(&common.base, &common.run);
            let pool = or_run(&pool, &common.run);
            let r = commands::meta(&cfg, &run, &base, &pool, adapters)?;
            print_json(&(r.before, r.after))?;
        }
        Command::Eval { common, pool, mode } => {
            let (cfg, run, base) = start(&common, FlagTarget::Translator)?;
            let pool = or_run(&pool, &common.run);
            print_json(&commands::eval(&cfg, &run, &base, &pool, mode)?)?;
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| runs[0].join("report"));
            let _lock = kvbabel_cli::run::RunLock::acquire(&out)?;
            for f in report(&runs, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

