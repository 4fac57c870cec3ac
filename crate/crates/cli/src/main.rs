use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fisup::sweep::SweepKind;
use fisup::{ExperimentConfig, Pipeline};

#[derive(Parser)]
#[command(name = "fisup", version, about = "Feature-importance supervision experiments")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "fisup-out")]
    out: PathBuf,
    /// Worker processes for training.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Comma-separated seeds, replacing `train.seeds`.
    #[arg(long, global = true, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Preset to run; repeat for several. Replaces `objective.presets`.
    #[arg(long = "preset", global = true)]
    presets: Vec<String>,
    /// Delete the output directory before starting.
    #[arg(long, global = true)]
    clean: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and split the dataset.
    Gen,
    /// Train every selected preset and seed.
    Train,
    /// Evaluate trained runs and write summary tables.
    Eval,
    /// Faithfulness, plausibility and metric/OOD analyses.
    Analyze,
    /// Ablation sweep.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
    },
    /// Bootstrap comparison of two presets.
    Compare { candidate: String, reference: String },
    /// gen, train, eval and analyze.
    Run,
    /// Train the single selected run inside a directory stamped by a parent process.
    #[command(hide = true)]
    Worker,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Cmd::Worker = cli.command {
        let (Some(seeds), [preset]) = (&cli.seed_list, cli.presets.as_slice()) else {
            anyhow::bail!("a worker needs exactly one --preset and --seed-list");
        };
        let pipeline = Pipeline::attach(cfg, &cli.out)?;
        for &seed in seeds {
            pipeline.train_one(preset, seed)?;
        }
        return Ok(());
    }
    let presets = match &cli.command {
        Cmd::Compare { candidate, reference } => Some(vec![candidate.clone(), reference.clone()]),
        _ => (!cli.presets.is_empty()).then(|| cli.presets.clone()),
    };
    let pipeline = Pipeline::open(cfg, &cli.out, cli.clean, presets, cli.seed_list.clone())?;
    let exe = std::env::current_exe().context("locating the worker executable")?;
    let worker = Some(exe.as_path());
    match &cli.command {
        Cmd::Gen => pipeline.generate()?,
        Cmd::Train => {
            pipeline.train_all(cli.jobs, worker)?;
        }
        Cmd::Eval => {
            pipeline.eval_all(cli.jobs, worker)?;
        }
        Cmd::Analyze => pipeline.analyze(cli.jobs, worker)?,
        Cmd::Sweep { kind } => {
            pipeline.sweep(*kind)?;
        }
        Cmd::Compare { candidate, reference } => {
            for c in pipeline.compare(candidate, reference, cli.jobs, worker)? {
                println!(
                    "{}\t{:.4} vs {:.4}\tdiff {:+.4} [{:.4}, {:.4}]\tp(>) {:.4}\tp(<) {:.4}",
                    c.metric,
                    c.candidate_mean,
                    c.reference_mean,
                    c.difference.estimate,
                    c.difference.lo,
                    c.difference.hi,
                    c.p_greater,
                    c.p_less
                );
            }
        }
        Cmd::Run => pipeline.run(cli.jobs, worker)?,
        Cmd::Worker => unreachable!(),
    }
    Ok(())
}
