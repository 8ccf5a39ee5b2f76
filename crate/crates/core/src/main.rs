use cardiofair::dataset::{generate_dataset, write_dataset, DatasetSpec, Split};
use cardiofair::harness::{
    evaluate_checkpoint, parse_experiments, render_report, run_experiment, sweep, ExperimentConfig, HarnessError,
    SweepAxis,
};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Train and evaluate segmentation models for group fairness on synthetic
/// cardiac phantoms.
#[derive(Debug, Parser)]
#[command(name = "cardiofair", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset from a TOML spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every experiment of a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Runs a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split of a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render comparison tables and plots from experiment directories.
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment per value of a sweep axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn single_experiment(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let mut configs = parse_experiments(&read(path)?)?;
    if configs.len() != 1 {
        return Err(HarnessError::InvalidConfig(format!(
            "sweep needs exactly one base experiment, {} has {}",
            path.display(),
            configs.len()
        )));
    }
    Ok(configs.remove(0))
}

fn run(command: Command) -> Result<Value, HarnessError> {
    match command {
        Command::GenData { spec, out, seed } => {
            let mut spec = DatasetSpec::from_toml(&read(&spec)?)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate_dataset(&spec)?;
            write_dataset(&data, &out)?;
            let counts: Value = Split::ALL
                .iter()
                .map(|&s| (s.name().to_string(), json!(data.group_counts(s))))
                .collect::<serde_json::Map<_, _>>()
                .into();
            Ok(json!({ "out": out, "seed": spec.seed, "counts": counts }))
        }
        Command::Train { config, out, seed } => {
            let mut configs = parse_experiments(&read(&config)?)?;
            if let Some(s) = seed {
                configs.iter_mut().for_each(|c| c.seeds = vec![s]);
            }
            let single = configs.len() == 1;
            let mut done = Vec::new();
            for cfg in &configs {
                let dir = if single { out.clone() } else { out.join(&cfg.name) };
                let result = run_experiment(cfg, &dir)?;
                done.push(json!({
                    "name": result.name,
                    "dir": dir,
                    "digest": result.digest(),
                    "runtime_s": result.runtime_s,
                }));
            }
            Ok(json!({ "experiments": done }))
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let report = evaluate_checkpoint(&checkpoint, &data, split, &out)?;
            Ok(json!({ "out": out, "report": report }))
        }
        Command::Report { inputs, out } => {
            let files = render_report(&inputs, &out)?;
            Ok(json!({
                "tables_csv": files.tables_csv,
                "tables_md": files.tables_md,
                "plots": files.plots,
                "seeds_csv": files.seeds_csv,
            }))
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let base = single_experiment(&config)?;
            let result = sweep(&base, axis, &values, &out)?;
            Ok(serde_json::to_value(&result).expect("sweep result serializes"))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", json!({ "error": "usage", "message": msg.trim() }));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
