use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;

use dpsign::adversary::AdversaryKind;
use dpsign::experiment::{
    load_data, parse_config, run_with_data, ConfigOverrides, ExperimentConfig, Preset, DATA_DIR_ENV,
};
use dpsign::federation::{Algorithm, ResidualScale, SensitivityMode};

/// Simulate DP-SIGNSGD / EF-DP-SIGNSGD federated training and write
/// per-round metrics as CSV.
#[derive(Debug, Parser)]
#[command(name = "dpsign-sim", version)]
struct Args {
    /// TOML experiment configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,

    /// dp-signsgd, ef-dp-signsgd, signsgd or fedavg.
    #[arg(long)]
    algorithm: Option<Algorithm>,

    #[arg(long)]
    epsilon: Option<f64>,

    #[arg(long)]
    delta: Option<f64>,

    /// Per-example L2 clip bound.
    #[arg(long)]
    clip: Option<f64>,

    /// Number of honest parties.
    #[arg(long)]
    parties: Option<usize>,

    /// Distinct labels held by each party.
    #[arg(long)]
    labels_per_party: Option<usize>,

    /// random or negative.
    #[arg(long)]
    byzantine_kind: Option<AdversaryKind>,

    /// Share of all parties that is Byzantine, in [0, 1).
    #[arg(long)]
    byzantine_frac: Option<f64>,

    #[arg(long)]
    rounds: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    batch_size: Option<usize>,

    #[arg(long)]
    eta: Option<f64>,

    #[arg(long)]
    lambda: Option<f64>,

    /// clip-bound or replace-one.
    #[arg(long, value_parser = parse_sensitivity)]
    sensitivity: Option<SensitivityMode>,

    /// inverse-voters or unit.
    #[arg(long, value_parser = parse_residual_scale)]
    residual_scale: Option<ResidualScale>,

    /// Directory with the MNIST IDX files.
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,

    /// Output CSV file, or directory when running a preset. Defaults to
    /// stdout for single runs.
    #[arg(long)]
    out: Option<PathBuf>,

    /// table1, byzantine or baselines.
    #[arg(long)]
    preset: Option<Preset>,

    /// Suppress per-round progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

fn parse_sensitivity(s: &str) -> Result<SensitivityMode, String> {
    match s {
        "clip-bound" => Ok(SensitivityMode::ClipBound),
        "replace-one" => Ok(SensitivityMode::ReplaceOne),
        other => Err(format!("expected clip-bound or replace-one, got {other:?}")),
    }
}

fn parse_residual_scale(s: &str) -> Result<ResidualScale, String> {
    match s {
        "inverse-voters" => Ok(ResidualScale::InverseVoters),
        "unit" => Ok(ResidualScale::Unit),
        other => Err(format!("expected inverse-voters or unit, got {other:?}")),
    }
}

impl Args {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            algorithm: self.algorithm,
            data_dir: None,
            parties: self.parties,
            labels_per_party: self.labels_per_party,
            byzantine_kind: self.byzantine_kind,
            byzantine_frac: self.byzantine_frac,
            epsilon: self.epsilon,
            delta: self.delta,
            clip: self.clip,
            sensitivity: self.sensitivity,
            batch_size: self.batch_size,
            eta: self.eta,
            lambda: self.lambda,
            residual_scale: self.residual_scale,
            rounds: self.rounds,
            seed: self.seed,
            out: self.out.clone(),
        }
    }
}

fn run_one(name: &str, config: &ExperimentConfig, quiet: bool) -> Result<String> {
    let data = load_data(&config.dataset, config.seed).context("loading dataset")?;
    let report = run_with_data(config, &data, |m| {
        if !quiet {
            eprintln!(
                "[{name}] round {:>4}  acc {:.4}  loss {:.4}",
                m.round, m.test_accuracy, m.train_loss
            );
        }
    })
    .with_context(|| format!("running {name}"))?;
    Ok(report.csv_string())
}

fn main() -> Result<()> {
    let args = Args::parse();
    let config = parse_config(args.config.as_deref(), &args.overrides(), args.data_dir.clone())
        .context("invalid configuration")?;

    match args.preset {
        None => {
            let csv = run_one(config.algorithm.name(), &config, args.quiet)?;
            match &config.out {
                Some(path) => fs::write(path, csv)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => io::stdout().write_all(csv.as_bytes())?,
            }
        }
        Some(preset) => {
            let Some(dir) = &config.out else {
                bail!("--out must name a directory when running a preset");
            };
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, run) in preset.runs(&config) {
                let csv = run_one(&name, &run, args.quiet)?;
                let path = dir.join(format!("{name}.csv"));
                fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
                if !args.quiet {
                    eprintln!("wrote {}", path.display());
                }
            }
        }
    }
    Ok(())
}
