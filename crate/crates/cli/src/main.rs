use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use raicl::corpus::class_histogram;
use raicl::evalkit::MacroOver;
use raicl::modelgw::MockPolicy;
use raicl::runner::{self, RunConfig};
use tracing_subscriber::EnvFilter;

/// Retrieval-augmented in-context classification of multimodal medical cases.
#[derive(Parser)]
#[command(name = "raicl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Skip samples that have no embedding instead of failing.
        #[arg(long)]
        allow_missing: bool,
        /// Drop samples whose image files are missing.
        #[arg(long)]
        check_files: bool,
        /// Accept only exact label matches when parsing replies.
        #[arg(long)]
        strict_exact: bool,
        /// Use stored vectors without normalizing them.
        #[arg(long)]
        raw: bool,
    },
    /// Print leave-one-out neighbors as JSON lines.
    Retrieve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        query_id: Option<String>,
    },
    /// Score a predictions file against a manifest.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Check a config and its data without contacting a model.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic dataset, embeddings and a mock-model config.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show the report of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn execute(cli: Cli) -> Result<()> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Run {
            config,
            allow_missing,
            check_files,
            strict_exact,
            raw,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.allow_missing |= allow_missing;
            cfg.check_files |= check_files;
            cfg.strict_exact |= strict_exact;
            cfg.raw_embeddings |= raw;
            let outcome = runner::run_experiment(&cfg)?;
            eprintln!(
                "{} new predictions, {} reused; output in {}",
                outcome.new_records,
                outcome.reused_records,
                cfg.output_dir.display()
            );
            if outcome.incomplete {
                eprintln!("run stopped at its limit; rerun to continue");
            }
            write!(stdout, "{}", outcome.report.to_table())?;
        }
        Command::Retrieve { config, query_id } => {
            let cfg = load_config(&config)?;
            for line in runner::retrieval_lines(&cfg, query_id.as_deref())? {
                if let Some(w) = &line.warning {
                    eprintln!("{}: {w}", line.query_id);
                }
                writeln!(stdout, "{}", serde_json::to_string(&line)?)?;
            }
        }
        Command::Evaluate {
            predictions,
            manifest,
            format,
        } => {
            let report =
                runner::evaluate_predictions(&predictions, &manifest, MacroOver::LabelSet)?;
            match format {
                Format::Json => writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?,
                Format::Table => write!(stdout, "{}", report.to_table("predictions"))?,
            }
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            let prepared = runner::prepare(&cfg)?;
            writeln!(
                stdout,
                "dataset {}: {} samples kept",
                prepared.manifest.name,
                prepared.manifest.len()
            )?;
            for (reason, n) in &prepared.filter.removed {
                writeln!(stdout, "  removed ({reason}): {n}")?;
            }
            writeln!(
                stdout,
                "embeddings: {} {}-d vectors, coverage {:.4}",
                prepared.store.len(),
                prepared.store.dim(),
                prepared.coverage.coverage()
            )?;
            write!(stdout, "{}", class_histogram(&prepared.manifest))?;
            writeln!(stdout, "config ok")?;
        }
        Command::Synth {
            classes,
            per_class,
            dim,
            noise,
            seed,
            out,
        } => {
            let (manifest, store) =
                runner::generate_synthetic(classes, per_class, dim, noise, seed)?;
            let paths = runner::write_synthetic(&out, &manifest, &store)?;
            let mut cfg = RunConfig::new("manifest.json", "embeddings.jsonl", "run");
            cfg.mock = Some(MockPolicy::FirstDemoLabel);
            cfg.seed = seed;
            let cfg_path = out.join("config.json");
            fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)? + "\n")
                .with_context(|| format!("writing {}", cfg_path.display()))?;
            writeln!(
                stdout,
                "wrote {} samples to {} and {}; run with --config {}",
                manifest.len(),
                paths.manifest.display(),
                paths.embeddings.display(),
                cfg_path.display()
            )?;
        }
        Command::Report { run, format } => {
            let report = runner::read_report(&run)?;
            match format {
                Format::Json => writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?,
                Format::Table => write!(stdout, "{}", report.to_table())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("RAICL_LOG").unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
