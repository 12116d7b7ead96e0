//! `gps`: genetic prompt search from the command line.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 fatal backend
//! error, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gps_core::backend::BackendError;
use gps_core::report::{
    ablate, estimate_cost, mean_std, run_search, write_report, AblationAxis, ConfigError, CostModel, Experiment,
    ReportError, RunError, RunRecord,
};
use gps_core::search::SearchError;

#[derive(Parser)]
#[command(name = "gps", version, about = "Genetic prompt search over a frozen language model")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the search once per data split.
    Search {
        #[arg(short, long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory for the event log, run records, checkpoints and report.
        #[arg(long, default_value = "gps-out")]
        out: PathBuf,
    },
    /// Sweep one setting and report the final metric per value.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Also write ablation.csv and curves.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run sweep values concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Estimate the forward passes a search will use.
    Cost {
        #[arg(short, long)]
        config: PathBuf,
        /// Leave out the final rerank.
        #[arg(long)]
        no_rerank: bool,
    },
    /// Summarize run records.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Write the CSV table here as well.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<RunError>() {
            if e.is_backend_fatal() {
                return 3;
            }
            if e.is_config() {
                return 2;
            }
        }
        if let Some(e) = cause.downcast_ref::<SearchError>() {
            match e {
                SearchError::BackendFatal(_) => return 3,
                SearchError::CorruptCheckpoint(_)
                | SearchError::VersionMismatch { .. }
                | SearchError::InvalidConfig(_)
                | SearchError::InvalidSeedPrompt(_) => return 2,
                _ => {}
            }
        }
        if cause.is::<ConfigError>() || cause.is::<ReportError>() || cause.is::<BackendError>() {
            return 2;
        }
    }
    1
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn search(config: &Path, resume: Option<&Path>, out: &Path) -> Result<()> {
    let exp = Experiment::load(config)?;
    let backend = exp.config.backend.build()?;
    let records = run_search(&exp, backend.as_ref(), Some(out), resume)?;
    for r in &records {
        println!("split {} (seed {}):", r.split_index, r.split_seed);
        for (rank, p) in r.final_top_k.iter().enumerate() {
            println!("  {:>2}. {:.4}  {}", rank + 1, p.metric.value(), p.text);
        }
    }
    let metrics: Vec<f64> = records.iter().filter_map(RunRecord::metric).collect();
    let (mean, std) = mean_std(&metrics);
    println!("{}: {mean:.4} ± {std:.4} over {} splits", exp.task.name, metrics.len());
    println!("artifacts in {}", out.display());
    Ok(())
}

fn ablation(config: &Path, axis: AblationAxis, values: &[usize], out: Option<&Path>, parallel: bool) -> Result<()> {
    let exp = Experiment::load(config)?;
    let backend = exp.config.backend.build()?;
    let result = ablate(&exp, backend.as_ref(), axis, values, parallel)?;
    print!("{}", result.to_csv());
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_file(&dir.join("ablation.csv"), &result.to_csv())?;
        write_file(&dir.join("curves.csv"), &result.curves_csv())?;
    }
    Ok(())
}

fn cost(config: &Path, no_rerank: bool) -> Result<()> {
    let exp = Experiment::load(config)?;
    let search = exp.config.search_config();
    let mut model = CostModel::new(
        search.iterations,
        search.pool_size,
        search.k(exp.seeds.len()),
        exp.config.split.total,
        exp.mean_choices(),
    );
    model.rerank_included = !no_rerank;
    println!(
        "T={} pool={} K={} dev={} choices={:.2} gen_cost={}",
        model.iterations,
        model.pool_size,
        model.top_k,
        model.dev_size,
        model.choices_per_example,
        model.gen_cost_per_prompt
    );
    println!("{}", estimate_cost(&model));
    Ok(())
}

fn report(paths: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let records = paths
        .iter()
        .map(|p| RunRecord::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let table = write_report(&records)?;
    print!("{}", table.to_table());
    if let Some(path) = csv {
        write_file(path, &table.to_csv())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Search { config, resume, out } => search(config, resume.as_deref(), out),
        Command::Ablate {
            config,
            axis,
            values,
            out,
            parallel,
        } => ablation(config, *axis, values, out.as_deref(), *parallel),
        Command::Cost { config, no_rerank } => cost(config, *no_rerank),
        Command::Report { records, csv } => report(records, csv.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
