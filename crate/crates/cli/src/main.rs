use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dnilm_cli::commands;
use dnilm_cli::config::{parse_split, ExperimentConfig, Overrides};
use dnilm_cli::{thread_budget, CliError, Result};

#[derive(Parser)]
#[command(name = "dnilm", version, about = "Appliance-state and PV-injection disaggregation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// dualnilm, fhmm, seq2point, cnn_lstm, transformer, seq2seq, dae or unet
    #[arg(long, global = true)]
    model: Option<String>,
    /// chronological[:secs], test_initial[:secs], test_middle[:secs] or leave_one_day_out
    #[arg(long, global = true)]
    split: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Mini-batch size
    #[arg(long, global = true)]
    batch: Option<usize>,
}

#[derive(Subcommand)]
enum Verb {
    /// Build the aligned, labelled household from a manifest
    Synthesize {
        /// Write the synthetic toy household's input files here and use them
        #[arg(long)]
        toy: Option<PathBuf>,
    },
    /// Train the configured model on one fold
    Train {
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Score a checkpoint on its fold's test block
    Evaluate {
        /// Defaults to <out>/<model>/model.ckpt
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the fold the checkpoint was trained for
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Train and score every fold of the split
    Crossval,
    /// Summarize metric tables into report.md and report.svg
    Report {
        /// Metric CSVs; defaults to every table under --out
        tables: Vec<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let overrides = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        model: c.model.clone(),
        split: c.split.as_deref().map(parse_split).transpose()?,
        epochs: c.epochs,
        lr: c.lr,
        batch: c.batch,
    };
    let cwd = std::env::current_dir().map_err(|e| CliError::Io {
        path: ".".into(),
        source: e,
    })?;
    let (cfg, base) = match &c.config {
        Some(p) => {
            let (cfg, base) = ExperimentConfig::load(p)?;
            (cfg, cwd.join(base))
        }
        None => (ExperimentConfig::default(), cwd.clone()),
    };
    let mut cfg = cfg.resolve(&base, &overrides)?;
    if !cfg.out.is_absolute() {
        cfg.out = cwd.join(&cfg.out);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let threads = thread_budget()?;
    if std::env::var_os("RAYON_NUM_THREADS").is_none() {
        // Numeric kernels size their pools from this.
        std::env::set_var("RAYON_NUM_THREADS", threads.to_string());
    }
    let mut cfg = load_config(&cli.common)?;
    match cli.verb {
        Verb::Synthesize { toy } => {
            if let Some(dir) = toy {
                let dir = if dir.is_absolute() { dir } else { std::env::current_dir().unwrap_or_default().join(dir) };
                cfg.manifest = Some(commands::write_toy_inputs(&cfg, &dir)?);
            }
            println!("{}", commands::synthesize(&cfg)?.display());
        }
        Verb::Train { fold } => println!("{}", commands::train(&cfg, fold)?.display()),
        Verb::Evaluate { checkpoint, fold } => {
            let rows = commands::evaluate_checkpoint(&cfg, checkpoint.as_deref(), fold)?;
            for r in rows {
                println!("{:<12} F1 {:.4}  injection RMSE {:.1} W", r.appliance, r.f1, r.rmse_watts);
            }
        }
        Verb::Crossval => {
            let rows = commands::crossval(&cfg, threads)?;
            for r in rows.iter().filter(|r| r.appliance == "macro") {
                println!("fold {:<3} macro F1 {:.4}  injection RMSE {:.1} W", r.fold, r.f1, r.rmse_watts);
            }
        }
        Verb::Report { tables } => {
            let tables = if tables.is_empty() {
                commands::find_metric_tables(&cfg.out)?
            } else {
                tables
            };
            println!("{}", commands::report(&tables, &cfg.out)?.display());
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
