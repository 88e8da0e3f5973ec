use clap::{Args, Parser, Subcommand};
use hybridssl::cli::{self, CliError, ExperimentConfig, Overrides, Split};
use hybridssl::trainer::Mode;
use std::path::PathBuf;
use std::process::ExitCode;

/// Hybrid semi-supervised outage localization on the WSCC 9-bus system.
#[derive(Parser)]
#[command(name = "hybridssl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply to omitted keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Data seed for gen-data; single training seed for train and sweep.
    #[arg(long)]
    seed: Option<u64>,
    /// Training mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Labeled fraction of the whole dataset.
    #[arg(long)]
    label_fraction: Option<f64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate outages and write the dataset to <out>/data.
    GenData(Common),
    /// Train one model; writes a checkpoint and a metrics stream.
    Train(Common),
    /// Evaluate a checkpoint on a dataset split and print JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (contains manifest.json).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Also write the report to <out>/eval.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every mode x label fraction x seed cell and write results.csv.
    Sweep(Common),
    /// Draw validation error rate against epoch for metrics files.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Directory for error_curves.svg.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn load(common: &Common) -> Result<(ExperimentConfig, Overrides), CliError> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let o = Overrides {
        seed: common.seed,
        mode: common.mode,
        label_fraction: common.label_fraction,
        out: common.out.clone(),
    };
    Ok((cfg, o))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(common) => {
            if common.mode.is_some() {
                return Err(CliError::config("--mode does not apply to gen-data"));
            }
            let (cfg, o) = load(&common)?;
            let cfg = cfg.with_data_overrides(&o)?;
            let (_, summary) = cli::gen_data(&cfg)?;
            println!("{summary}");
        }
        Command::Train(common) => {
            let (cfg, o) = load(&common)?;
            let cfg = cfg.with_train_overrides(&o)?;
            let art = cli::train(&cfg)?;
            if let Some(last) = art.metrics.last() {
                println!(
                    "{} seed {}: {} epochs, validation accuracy {:.4}",
                    cfg.train.mode.name(),
                    cfg.train.seeds[0],
                    art.metrics.len(),
                    last.val_accuracy
                );
            }
            println!("checkpoint {}", art.checkpoint.display());
            println!("metrics {}", art.metrics_file.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let report = cli::eval(&checkpoint, &data, split)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)
                    .and_then(|_| std::fs::write(dir.join("eval.json"), &json))
                    .map_err(|e| CliError::io(format!("cannot write eval.json: {e}")))?;
            }
            println!("{json}");
        }
        Command::Sweep(common) => {
            let (cfg, o) = load(&common)?;
            let cfg = cfg.with_train_overrides(&o)?;
            let (path, rows) = cli::sweep(&cfg)?;
            for r in &rows {
                println!(
                    "{:<22} {:>7} {:>5} labels  {:.2} +/- {:.2} %",
                    r.mode.name(),
                    r.label_fraction,
                    r.n_labels,
                    100.0 * r.mean_acc,
                    100.0 * r.std_acc
                );
            }
            println!("results {}", path.display());
        }
        Command::Plot { metrics, out } => {
            let path = cli::plot(&metrics, &out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
