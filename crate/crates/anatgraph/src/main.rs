//! Command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use anatgraph::commands::{
    cmd_explain, cmd_extract, cmd_graph, cmd_probe, cmd_synth, cmd_train, ProbeTask,
};
use anatgraph::config::RunConfig;
use anatgraph::exit_code_for;
use anatgraph_core::error::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "anatgraph",
    version,
    about = "Self-supervised representation learning on anatomy-anchored patch graphs"
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root random seed (overrides the config file and ANATGRAPH_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel stages (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of subjects (overrides the config).
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Export per-subject patch graphs as JSON.
    Graph {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the interleaved contrastive training loop.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the initial checkpoint and exit without training.
        #[arg(long)]
        init_only: bool,
        /// Outer steps (overrides train.t_max).
        #[arg(long)]
        steps: Option<u64>,
        /// Learning rate (overrides train.lr).
        #[arg(long)]
        lr: Option<f32>,
        /// Stop after this many outer steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Extract frozen pooled features to CSV (projection head discarded).
    Extract {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-node features.
        #[arg(long)]
        per_node: Option<PathBuf>,
    },
    /// Fit a frozen-feature probe with k-fold cross-validation.
    Probe {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Number of folds (overrides probe.k).
        #[arg(long)]
        k: Option<usize>,
        /// L2 penalty (overrides probe.lambda).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose a probe's output over a subject's graph nodes.
    Explain {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe result JSON (the refit model is used).
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        subject: String,
        /// Class row of a logistic probe to explain.
        #[arg(long, default_value_t = 1)]
        target_class: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional heatmap volume output.
        #[arg(long)]
        render: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Classification,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Ok(env_seed) = std::env::var("ANATGRAPH_SEED") {
        cfg.seed = env_seed
            .parse::<u64>()
            .map_err(|e| Error::config(format!("ANATGRAPH_SEED={env_seed}: {e}")))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Synth { out, subjects } => {
            if let Some(n) = subjects {
                cfg.synth.subjects = *n;
            }
            let manifest = cmd_synth(&cfg, out)?;
            println!("wrote {} subjects to {}", manifest.subjects.len(), out.display());
            Ok(())
        }
        Command::Graph { cohort, out } => {
            let count = cmd_graph(&cfg, cohort, out)?;
            println!("wrote {count} graphs to {}", out.display());
            Ok(())
        }
        Command::Train { cohort, out, resume, init_only, steps, lr, stop_after } => {
            if let Some(steps) = steps {
                cfg.train.t_max = Some(*steps);
            }
            if let Some(lr) = lr {
                cfg.train.lr = *lr;
            }
            cmd_train(&cfg, cohort, out, resume.as_deref(), *init_only, *stop_after)?;
            println!("training artifacts in {}", out.display());
            Ok(())
        }
        Command::Extract { cohort, checkpoint, out, per_node } => {
            cmd_extract(&cfg, cohort, checkpoint, out, per_node.as_deref())?;
            println!("features in {}", out.display());
            Ok(())
        }
        Command::Probe { features, labels, task, k, lambda, out } => {
            if let Some(k) = k {
                cfg.probe.k = *k;
            }
            if let Some(lambda) = lambda {
                cfg.probe.lambda = *lambda;
            }
            let task = match task {
                TaskArg::Regression => ProbeTask::Regression,
                TaskArg::Classification => ProbeTask::Classification,
            };
            let result = cmd_probe(&cfg, features, labels, task, out)?;
            println!("{} = {:.4} +- {:.4}", result.metric, result.mean, result.std);
            Ok(())
        }
        Command::Explain { cohort, checkpoint, probe, subject, target_class, out, render } => {
            let result = cmd_explain(
                &cfg,
                cohort,
                checkpoint,
                probe,
                subject,
                *target_class,
                out,
                render.as_deref(),
            )?;
            println!("logit_check = {:.3e}", result.logit_check);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
