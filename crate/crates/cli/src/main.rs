use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use carrl_core::eval::{
    emit_report, merge_rows, read_metrics_csv, regenerate_report, run_evaluation_seeds, AttackMode, EvalConfig,
    MetricRow, METRICS_FILE,
};
use carrl_core::trainer::{checkpoint, resume, run_alternating_training, ExperimentConfig};

#[derive(Parser)]
#[command(name = "carrl", version, about = "Train and evaluate attack-robust driving policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Alternating adversary/defender training.
    Train {
        /// Experiment config (`key = value` lines); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training seed; without it every seed listed in the config is
        /// trained into `<out>/seed_<n>`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a run from its checkpoint.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a frozen defender, optionally under attack.
    Evaluate {
        #[arg(long)]
        defender: PathBuf,
        #[arg(long)]
        adversary: Option<PathBuf>,
        /// none | criticality_aware | continuous | random_trigger
        #[arg(long, default_value = "none")]
        mode: String,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.5)]
        density: f64,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        /// Comma-separated evaluation seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 5)]
        budget: usize,
        /// Experiment config whose environment settings to use.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report directory; rows for the same condition and seed are
        /// replaced, others kept.
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate the summary and plots from `metrics.csv`.
    Report {
        #[arg(long = "in")]
        dir: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ExperimentConfig::parse(&text)?)
        }
    }
}

fn train(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let runs: Vec<(u64, PathBuf)> = match seed {
        Some(s) => vec![(s, out.to_path_buf())],
        None => cfg.seeds.iter().map(|&s| (s, out.join(format!("seed_{s}")))).collect(),
    };
    for (s, dir) in runs {
        eprintln!("training mode {} seed {s} into {}", cfg.mode, dir.display());
        let t = run_alternating_training(cfg.clone(), s, Some(&dir))?;
        for r in &t.log {
            eprintln!(
                "iter {:>3} {:<9} return {:>8.4} collisions {:>4} lambda {:.4} ({:.1}s)",
                r.iteration,
                format!("{:?}", r.phase).to_lowercase(),
                r.mean_return,
                r.collisions,
                r.lambda_def,
                r.wall_time_s
            );
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    defender: &Path,
    adversary: Option<&Path>,
    mode: &str,
    epsilon: f64,
    density: f64,
    episodes: usize,
    seeds: Vec<u64>,
    budget: usize,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mode: AttackMode = mode.parse()?;
    let def = checkpoint::load_defender(defender).with_context(|| format!("loading {}", defender.display()))?;
    let adv = adversary
        .map(|p| checkpoint::load_adversary(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    if mode.needs_adversary() && adv.is_none() {
        bail!(carrl_core::Error::Usage(format!("--mode {mode} requires --adversary")));
    }
    let cfg = EvalConfig {
        n_episodes: episodes,
        attack_mode: mode,
        epsilon,
        budget,
        seeds,
        density,
        env: load_config(config)?.env,
        ..EvalConfig::default()
    };
    cfg.validate()?;
    let results = run_evaluation_seeds(&def.actor, adv.as_ref(), &cfg)?;
    let condition = cfg.condition();
    let rows: Vec<MetricRow> = results
        .iter()
        .map(|(seed, m)| {
            println!(
                "{mode} eps={epsilon} rho={density} seed={seed}: SR {:.4} CR {:.4} DE {:.4} ({} episodes, {} attacked steps)",
                m.sr, m.cr, m.de, m.episodes, m.attacked_steps
            );
            MetricRow::new(condition, *seed, m)
        })
        .collect();
    let csv = out.join(METRICS_FILE);
    let existing = if csv.exists() { read_metrics_csv(&csv)? } else { Vec::new() };
    emit_report(&merge_rows(existing, &rows), out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => train(config.as_deref(), seed, &out),
        Command::Resume { checkpoint } => {
            let t = resume(&checkpoint)?;
            eprintln!("finished at iteration {} ({} log records)", t.iteration, t.log.len());
            Ok(())
        }
        Command::Evaluate {
            defender,
            adversary,
            mode,
            epsilon,
            density,
            episodes,
            seeds,
            budget,
            config,
            out,
        } => evaluate(
            &defender,
            adversary.as_deref(),
            &mode,
            epsilon,
            density,
            episodes,
            seeds,
            budget,
            config.as_deref(),
            &out,
        ),
        Command::Report { dir } => {
            for p in regenerate_report(&dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

/// Exit status 2 for bad input (usage or configuration), 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<carrl_core::Error>() {
        Some(carrl_core::Error::Usage(_) | carrl_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
