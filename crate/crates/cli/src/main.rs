use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use cimtrain::cost::Preset;
use cimtrain::crossbar::CrossbarDeployment;
use cimtrain::harness::{
    load_catalog, load_model, prepare_dataset, report_text, run_estimate, run_estimate_preset, run_map, run_report,
    run_sweep, run_train, ExperimentConfig, HarnessError, MODEL_FILE,
};

/// Hardware-constrained quantized training and cost estimation for
/// NVM crossbar accelerators.
#[derive(Debug, Parser)]
#[command(name = "cimtrain", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML). Built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the configuration.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write model.json, metrics.csv and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured number of training steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Use the full dataset and the `full_steps` budget.
        #[arg(long)]
        full: bool,
    },
    /// Map a trained model onto crossbar tiles and verify ideal-device
    /// exactness against the digital forward pass.
    Map {
        #[command(flatten)]
        common: Common,
        /// Trained model; defaults to model.json in the output directory.
        #[arg(long, short)]
        model: Option<PathBuf>,
    },
    /// Estimate energy and area of a mapped model or a reference scenario.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Trained model; defaults to model.json in the output directory.
        #[arg(long, short, conflicts_with = "preset")]
        model: Option<PathBuf>,
        /// One of: cifar10-tf8, cifar10-tf4, cifar10-ours4, har-tf8, har-tf4, har-ours4.
        #[arg(long)]
        preset: Option<Preset>,
    },
    /// Aggregate the artifacts of an output directory into report.json and report.txt.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Train once per unipolar fraction and tabulate accuracy, area and read energy.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated unipolar fractions; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        full: bool,
    },
    /// Train, map, estimate and report in one go.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        full: bool,
    },
}

fn load(common: &Common, steps: Option<usize>) -> Result<(ExperimentConfig, PathBuf), HarnessError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = steps {
        cfg.train.steps = steps;
        cfg.full_steps = cfg.full_steps.map(|_| steps);
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn model_path(model: &Option<PathBuf>, out: &Path) -> PathBuf {
    model.clone().unwrap_or_else(|| out.join(MODEL_FILE))
}

fn map(cfg: &ExperimentConfig, model: &Path, out: &Path) -> Result<(), HarnessError> {
    let net = load_model(model)?;
    let (data, _) = prepare_dataset(cfg, false)?;
    let (dep, summary) = run_map(cfg, &net, &data, out)?;
    println!(
        "mapped {} layers onto {} tiles ({} bipolar column pairs); exactness check passed on {} samples",
        dep.layers.len(),
        dep.tile_count(),
        dep.subtractors(),
        summary.exactness.samples
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { common, steps, full } => {
            let (cfg, out) = load(&common, steps)?;
            info!("training {} into {}", cfg.network, out.display());
            let run = run_train(&cfg, full, &out)?;
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
            println!(
                "trained {} steps: validation {}, test {}; wrote {}",
                run.summary.steps,
                pct(run.summary.val_accuracy),
                pct(run.summary.test_accuracy),
                out.display()
            );
        }
        Command::Map { common, model } => {
            let (cfg, out) = load(&common, None)?;
            map(&cfg, &model_path(&model, &out), &out)?;
        }
        Command::Estimate { common, model, preset } => {
            let (cfg, out) = load(&common, None)?;
            let report = match preset {
                Some(p) => {
                    let catalog = load_catalog(&cfg)?;
                    run_estimate_preset(p, &catalog, common.out.as_deref())?
                }
                None => {
                    let net = load_model(&model_path(&model, &out))?;
                    let dep = CrossbarDeployment::build(&net, &cfg.deployment)?;
                    run_estimate(&cfg, &net, &dep, &out)?
                }
            };
            print!("{}", report.to_text());
        }
        Command::Report { common } => {
            let (cfg, out) = load(&common, None)?;
            let catalog = load_catalog(&cfg)?;
            let report = run_report(&out, &catalog)?;
            print!("{}", report_text(&report));
        }
        Command::Sweep { common, fractions, steps, full } => {
            let (cfg, out) = load(&common, steps)?;
            let fractions = fractions.unwrap_or_else(|| cfg.sweep_fractions.clone());
            info!("sweeping {} fractions into {}", fractions.len(), out.display());
            let rows = run_sweep(&cfg, &fractions, full, &out)?;
            println!("fraction,accuracy,crossbar_area_mm2,nvm_reads,read_energy_ratio");
            for r in rows {
                println!(
                    "{},{:.4},{:.6},{},{:.4}",
                    r.fraction, r.accuracy, r.crossbar_area_mm2, r.nvm_reads, r.read_energy_ratio
                );
            }
        }
        Command::Run { common, steps, full } => {
            let (cfg, out) = load(&common, steps)?;
            let run = run_train(&cfg, full, &out)?;
            let (dep, _) = run_map(&cfg, &run.net, &run.data, &out)?;
            run_estimate(&cfg, &run.net, &dep, &out)?;
            let report = run_report(&out, &load_catalog(&cfg)?)?;
            print!("{}", report_text(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
