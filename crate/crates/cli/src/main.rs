use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ttrf_cli::commands::{
    cmd_ablate, cmd_adapt, cmd_eval, cmd_pretrain, cmd_split, cmd_theory, load_config, CmdError,
};
use ttrf_core::iamae::InferenceMode;
use ttrf_core::theory::TrialParams;

/// Test-time representation finetuning for graph node classification.
#[derive(Parser)]
#[command(name = "ttrf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (flat `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints, logs, and tables.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Override a config key, e.g. `--set intervention.rank=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and write it as text files.
    Split {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pretrain one backbone per seed on the source split.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Run a single seed instead of every config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt interventions on the target graph against frozen backbones.
    Adapt {
        #[command(flatten)]
        common: CommonArgs,
        /// Run a single seed instead of every config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate frozen and adapted accuracy per seed.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Inference mode override: gated_dual_pass | propagating.
        #[arg(long)]
        mode: Option<String>,
        /// Record wall-clock timings (makes outputs non-reproducible).
        #[arg(long)]
        timings: bool,
    },
    /// Paired ablation arms over variants, masking, and selection.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Arms as `<variant>:<iamae|mae_uniform>:<uncertainty|random>`;
        /// defaults to the full grid.
        #[arg(long = "arm")]
        arms: Vec<String>,
    },
    /// Run the closed-form risk-reduction harness.
    Theory {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 200)]
        nodes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        repair_rank: usize,
        #[arg(long, default_value_t = 0.9)]
        repair_quality: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Split { common } => {
            let cfg = load_config(&common.config, &common.overrides)?;
            cmd_split(&cfg, &common.out_dir)
        }
        Command::Pretrain { common, seed } => {
            let cfg = load_config(&common.config, &common.overrides)?;
            cmd_pretrain(&cfg, &common.out_dir, seed)
        }
        Command::Adapt { common, seed } => {
            let cfg = load_config(&common.config, &common.overrides)?;
            cmd_adapt(&cfg, &common.out_dir, seed)
        }
        Command::Eval { common, mode, timings } => {
            let cfg = load_config(&common.config, &common.overrides)?;
            let mode = match mode {
                None => None,
                Some(m) => Some(InferenceMode::parse(&m).ok_or_else(|| {
                    CmdError::Usage(format!(
                        "unknown mode `{m}` (gated_dual_pass | propagating)"
                    ))
                })?),
            };
            cmd_eval(&cfg, &common.out_dir, mode, timings)
        }
        Command::Ablate { common, arms } => {
            let cfg = load_config(&common.config, &common.overrides)?;
            cmd_ablate(&cfg, &common.out_dir, &arms)
        }
        Command::Theory {
            trials,
            nodes,
            dim,
            classes,
            repair_rank,
            repair_quality,
            seed,
            out_dir,
        } => {
            let params = TrialParams { n: nodes, d: dim, classes, m: repair_rank, repair_quality };
            cmd_theory(trials, &params, seed, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CmdError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
