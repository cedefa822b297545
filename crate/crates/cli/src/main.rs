use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use inclearn::data::{
    class_correlation, class_stats, load_csv, synthetic_gaussians, write_class_counts,
    write_correlation, write_records, CsvSchema, SyntheticSpec,
};
use inclearn_cli::runner::CONFIG_COPY;
use inclearn_cli::{report, resolve_output_dir, run, ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "inclearn",
    version,
    about = "Task-incremental learning experiments on feature CSVs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (order, method, S) combination of a config file.
    Run {
        config: PathBuf,
        /// Overrides the config and INCLEARN_OUTPUT_DIR.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Rebuild the summary tables of a results directory.
    Report {
        dir: PathBuf,
        /// S for the with-replay column; defaults to the value in the saved config, else 6.
        #[arg(long)]
        holdout: Option<usize>,
    },
    /// Class distribution and inter-class correlation of a feature CSV.
    Stats {
        dataset: PathBuf,
        /// TOML column mapping (label_column, subject_column, feature_columns, class_names).
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Directory for class_counts.csv and class_correlation.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic Gaussian dataset described by a TOML spec.
    Synth {
        spec: PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUN_FAILURES: u8 = 2;

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn saved_holdout(dir: &Path) -> Option<usize> {
    let text = std::fs::read_to_string(dir.join(CONFIG_COPY)).ok()?;
    ExperimentConfig::from_toml(&text, dir)
        .ok()
        .map(|c| c.fixed_holdout)
}

fn main_inner(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            output_dir,
            workers,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if workers.is_some() {
                cfg.workers = workers;
                cfg.validate()?;
            }
            let dir = resolve_output_dir(&cfg, output_dir.as_deref());
            let outcome = run(&cfg, &dir)?;
            println!(
                "{} runs written to {}",
                outcome.planned,
                outcome.output_dir.display()
            );
            if outcome.failed > 0 {
                eprintln!(
                    "{} of {} runs failed; see runs.csv",
                    outcome.failed, outcome.planned
                );
                return Ok(ExitCode::from(EXIT_RUN_FAILURES));
            }
        }
        Command::Report { dir, holdout } => {
            let fixed = holdout.or_else(|| saved_holdout(&dir)).unwrap_or(6);
            let s = report(&dir, fixed)?;
            if s.runs_found == 0 {
                println!("no runs in {}", dir.display());
            } else {
                println!(
                    "{} runs summarised ({} failed) in {}",
                    s.runs_found,
                    s.failed_runs,
                    dir.display()
                );
            }
        }
        Command::Stats {
            dataset,
            schema,
            out,
        } => {
            let schema: CsvSchema = match schema {
                Some(p) => read_toml(&p)?,
                None => CsvSchema::default(),
            };
            let ds = load_csv(&dataset, &schema)?;
            let counts = class_stats(&ds)?;
            let corr = class_correlation(&ds)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    write_class_counts(
                        &counts,
                        std::fs::File::create(dir.join("class_counts.csv"))?,
                    )?;
                    write_correlation(
                        ds.class_names(),
                        &corr,
                        std::fs::File::create(dir.join("class_correlation.csv"))?,
                    )?;
                    println!("wrote class statistics to {}", dir.display());
                }
                None => {
                    write_class_counts(&counts, std::io::stdout().lock())?;
                    println!();
                    write_correlation(ds.class_names(), &corr, std::io::stdout().lock())?;
                }
            }
        }
        Command::Synth { spec, out } => {
            let spec: SyntheticSpec = read_toml(&spec)?;
            let ds = synthetic_gaussians(&spec)?;
            match out {
                Some(path) => inclearn::data::write_csv(&ds, &path)?,
                None => {
                    write_records(&ds, &mut csv::Writer::from_writer(std::io::stdout().lock()))?
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            if e.downcast_ref::<ConfigError>().is_some() {
                eprintln!("config error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
