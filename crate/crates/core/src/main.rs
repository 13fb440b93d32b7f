use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kfdiag::diagnosis::write_verdicts_csv;
use kfdiag::harness::{
    calibrate, emit_plot_data, replay, run_experiment, Experiment, ReplaySettings,
};
use kfdiag::model::parse_model;
use kfdiag::{Error, Result};

#[derive(Parser)]
#[command(name = "kfdiag", version, about = "Kalman-filter anomaly detection and diagnosis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario kind and seed of an experiment config.
    Run {
        /// Experiment config (TOML).
        config: PathBuf,
        /// Override a config key, e.g. `--set scenario.steps=400`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory; overrides `output.dir` and the environment default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diagnose an external measurement trace against a model file.
    Replay {
        /// Measurement CSV: a scenario file or `k, z_1..` columns.
        measurements: PathBuf,
        /// Model file used by the filter.
        model: PathBuf,
        /// Take detector and diagnosis settings from an experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a detector, diagnosis or scenario setting.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Verdict CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate TH_d for the monitor channels of an experiment config.
    Calibrate {
        /// Experiment config (TOML).
        config: PathBuf,
        /// Override a config key.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write plot-ready CSVs from an experiment output directory.
    PlotData {
        /// Output directory of a previous `run`.
        artifact_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed_index: usize,
        /// Destination directory; `<artifact_dir>/plot` when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, set, out } => {
            let exp = Experiment::load(&config, &set)?;
            let dir = out.unwrap_or_else(|| exp.output_dir());
            let report = run_experiment(&exp, Some(&dir))?;
            println!("config_hash {}", report.config_hash);
            for row in &report.confusion {
                let cells: Vec<String> = kfdiag::diagnosis::Outcome::ALL
                    .iter()
                    .map(|o| format!("{}={}", o.as_str(), row.majority.get(*o)))
                    .collect();
                println!("{:<12} {}", row.kind.as_str(), cells.join(" "));
            }
            println!("artifacts {}", dir.display());
        }
        Command::Replay { measurements, model, config, set, out } => {
            let model_text = read(&model)
                .map_err(|_| Error::Config(format!("model file `{}` cannot be read", model.display())))?;
            let model = parse_model(&model_text)?;
            let config_text = config.as_ref().map(read).transpose()?;
            let settings = ReplaySettings::from_sources(config_text.as_deref(), &set)?;
            let run = replay(&read(&measurements)?, &model, &settings)?;
            let comment = format!("config_hash={} seed=none source={}", settings.hash()?, measurements.display());
            let mut buf = Vec::new();
            write_verdicts_csv(&run.verdicts, model.m(), &mut buf, Some(&comment))?;
            match out {
                Some(path) => fs::write(&path, &buf).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
                None => std::io::stdout().write_all(&buf)?,
            }
            log::info!("majority verdict {}", run.summary.majority.as_str());
        }
        Command::Calibrate { config, set } => {
            let exp = Experiment::load(&config, &set)?;
            let report = calibrate(&exp)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?);
        }
        Command::PlotData { artifact_dir, seed_index, out } => {
            let out = out.unwrap_or_else(|| artifact_dir.join("plot"));
            for path in emit_plot_data(&artifact_dir, seed_index, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kfdiag: {e}");
            match e {
                Error::Numerical { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
