//! `tsg`: dataset generation, training, prediction, evaluation and ablation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tsg_core::config::RunConfig;
use tsg_core::data::{generate, read_dataset, write_dataset, Split};
use tsg_core::pipeline::{
    ablate, build_model, load_model, predict, read_predictions, score_predictions, train, write_predictions, Variant,
};
use tsg_core::TsgError;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tsg",
    version,
    about = "Temporal sentence grounding with sentence-conditioned adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train on the train split; writes config, checkpoint and CSV logs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Write ranked predictions for one split as JSON lines.
    Predict {
        /// Directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        force: bool,
    },
    /// Score a trained run (or a predictions file) on the test split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score this JSONL file instead of predicting.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train and compare the four variants over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// First seed; the following `seeds - 1` integers are used too.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Refuses to write into an existing non-empty target unless forced.
fn guard_output(path: &Path, force: bool) -> Result<()> {
    let occupied = if path.is_dir() {
        fs::read_dir(path)?.next().is_some()
    } else {
        path.exists()
    };
    if occupied && !force {
        return Err(TsgError::Input(format!("{} already exists; pass --force to overwrite", path.display())).into());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            force,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(s) = seed {
                config.data.seed = s;
            }
            let dataset = generate(&config.data)?;
            write_dataset(&out, &dataset, force)?;
            println!(
                "wrote {} videos and {} queries to {}",
                dataset.videos.len(),
                dataset.queries.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            force,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(s) = seed {
                config.train.seed = s;
            }
            guard_output(&out, force)?;
            let dataset = read_dataset(&data)?;
            if dataset.config != config.data {
                log::warn!("dataset was generated with a different [data] section; using the dataset as is");
            }
            let mut model = build_model(&config, &dataset)?;
            let log = train(&mut model, &dataset.subset(Split::Train), &config, Some(&out))?;
            if let Some(last) = log.epochs.last() {
                println!(
                    "trained {} epochs, final mean loss {:.4}",
                    log.epochs.len(),
                    last.mean_loss
                );
            }
            println!("run written to {}", out.display());
        }
        Command::Predict {
            run,
            data,
            out,
            split,
            force,
        } => {
            guard_output(&out, force)?;
            let dataset = read_dataset(&data)?;
            let (config, model) = load_model(&run, &dataset)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let records = predict(&model, &dataset, split, config.eval.top_k)?;
            write_predictions(&out, &records)?;
            println!("wrote {} predictions to {}", records.len(), out.display());
        }
        Command::Eval {
            run,
            data,
            predictions,
            out,
            force,
        } => {
            let dataset = read_dataset(&data)?;
            let (config, model) = load_model(&run, &dataset)?;
            let records = match predictions {
                Some(path) => read_predictions(&path)?,
                None => predict(&model, &dataset, Split::Test, config.eval.top_k)?,
            };
            let report = score_predictions(&records, &dataset, config.eval.strict)?;
            match out {
                Some(path) => {
                    guard_output(&path, force)?;
                    write_json(&path, &report)?;
                }
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Ablate {
            config,
            data,
            out,
            seed,
            seeds,
            force,
        } => {
            let config = load_config(config.as_deref())?;
            guard_output(&out, force)?;
            let dataset = read_dataset(&data)?;
            let first = seed.unwrap_or(config.train.seed);
            let seeds: Vec<u64> = (first..first + seeds.max(1)).collect();
            let report = ablate(&config, &dataset, &Variant::ALL, &seeds)?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("ablation.json"), &report)?;
            let table = report.table();
            fs::write(out.join("ablation.md"), &table)?;
            for v in Variant::ALL {
                fs::write(out.join(format!("{}.toml", v.name())), v.apply(&config).to_toml())?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<TsgError>() {
        Some(e) if e.is_config() => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
