//! Command-line front end: train, eval, ablate, impute-eval, and synth
//! subcommands over a JSON experiment config.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ginar::experiment::{self, ExperimentConfig, Overrides};
use ginar::metrics::Metrics;

#[derive(Parser)]
#[command(
    name = "ginar",
    about = "Multivariate forecasting with variable missing: experiments and reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config (schema documented in the README).
    #[arg(long)]
    config: PathBuf,
    /// Override the missing rate from the config.
    #[arg(long)]
    rate: Option<f64>,
    /// Override the seed list, comma separated (e.g. `--seeds 0,1,2`).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Disable the interpolation attention (zero-fill pass-through).
    #[arg(long)]
    no_ia: bool,
    /// Disable the predefined graph.
    #[arg(long)]
    no_pg: bool,
    /// Disable the adaptive graph.
    #[arg(long)]
    no_ag: bool,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on every seed and write reports, history, checkpoints, and
    /// the spatial snapshot.
    Train(CommonArgs),
    /// Score a stored checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to load; defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Seed whose mask the checkpoint was trained under; defaults to
        /// the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare the full model against the three component removals.
    Ablate(CommonArgs),
    /// Compare zero-filled inputs against the interpolation front-end on
    /// the MLP stand-in.
    ImputeEval(CommonArgs),
    /// Generate the configured synthetic benchmark as CSV files.
    Synth(CommonArgs),
}

impl CommonArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        cfg.apply_overrides(&Overrides {
            rate: self.rate,
            seeds: self.seeds.clone(),
            no_ia: self.no_ia,
            no_pg: self.no_pg,
            no_ag: self.no_ag,
            out: self.out.clone(),
        });
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
        match self.out.clone().or_else(|| cfg.out_dir.clone()) {
            Some(dir) => Ok(dir),
            None => bail!("no output directory: pass --out or set out_dir in the config"),
        }
    }
}

fn metric_line(m: &Metrics) -> String {
    format!(
        "mae {:.4}  rmse {:.4}  mape {}",
        m.mae,
        m.rmse,
        match m.mape {
            Some(p) => format!("{p:.2}%"),
            None => "undefined".into(),
        }
    )
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg)?;
            let report = experiment::run_experiment(&cfg, &out)?;
            for s in &report.summary.seeds {
                println!("seed {:>3}: {}", s.seed, metric_line(&s.overall));
            }
            println!("mean    : {}", metric_line(&report.summary.aggregate.mean));
            println!("config hash {}", report.config_hash);
            println!("reports written to {}", out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            seed,
        } => {
            let cfg = common.load()?;
            let out = common.out.clone().or_else(|| cfg.out_dir.clone());
            let checkpoint = match checkpoint {
                Some(p) => p,
                None => match &out {
                    Some(dir) => dir.join("checkpoint.json"),
                    None => bail!("no checkpoint: pass --checkpoint or an output directory"),
                },
            };
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let report = experiment::run_eval(&cfg, &checkpoint, seed, out.as_deref())?;
            println!(
                "checkpoint {} on seed {seed}: {}",
                checkpoint.display(),
                metric_line(&report.result.overall)
            );
            if let Some(m) = &report.result.masked_group {
                println!("masked variables : {}", metric_line(m));
            }
            if let Some(m) = &report.result.normal_group {
                println!("normal variables : {}", metric_line(m));
            }
        }
        Command::Ablate(common) => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg)?;
            let report = experiment::run_ablation(&cfg, &out)?;
            for v in &report.variants {
                println!(
                    "{:<6}: {}",
                    v.name,
                    metric_line(&v.summary.aggregate.mean)
                );
            }
            println!("reports written to {}", out.display());
        }
        Command::ImputeEval(common) => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg)?;
            let report = experiment::run_impute_eval(&cfg, &out)?;
            println!("zero-fill: {}", metric_line(&report.zero_fill.mean));
            println!("ia       : {}", metric_line(&report.ia.mean));
            println!("reports written to {}", out.display());
        }
        Command::Synth(common) => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg)?;
            let files = experiment::export_synth(&cfg, &out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
