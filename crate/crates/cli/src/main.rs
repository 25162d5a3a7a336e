use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use chipnet_core::config::{config_keys, RunConfig};
use chipnet_core::pipeline::{self, PruneOptions};

/// Budget-constrained channel pruning: pretrain, prune, finetune.
///
/// Every command reads a TOML config (or a `manifest-*.json` written by an
/// earlier run), writes its artifacts into `out_dir` and prints a JSON
/// summary on stdout.
#[derive(Parser, Debug)]
#[command(name = "chipnet", version, max_term_width = 100)]
struct Cli {
    /// Config file (TOML) or run manifest (JSON).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set prune.target=0.25`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Ablation: logistic masks only, without Heaviside projection or crispness loss.
    #[arg(long, global = true)]
    no_crispness: bool,

    /// Ablation: evaluate the budget on raw masks instead of rounded ones.
    #[arg(long, global = true)]
    no_logistic_round: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the dense network and write pretrain.ckpt.
    Pretrain,
    /// Soft-prune the pretrained network and select the best hard mask.
    Prune {
        /// Continue from prune.ckpt in out_dir.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs are done in total.
        #[arg(long, value_name = "EPOCHS")]
        stop_after: Option<usize>,
    },
    /// Materialize the pruned network and finetune it.
    Finetune {
        /// Prune or transfer checkpoint; defaults to out_dir/prune.ckpt.
        #[arg(long, value_name = "CHECKPOINT")]
        from: Option<PathBuf>,
    },
    /// Validation loss and accuracy of a checkpoint.
    Evaluate {
        /// Defaults to the latest stage found in out_dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ignore any selected mask and keep every channel.
        #[arg(long)]
        all_ones: bool,
    },
    /// Write the selected hard mask of a prune checkpoint.
    ExportMask {
        /// Defaults to out_dir/prune.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to out_dir/mask.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Install a host mask into the pretrained network of out_dir.
    TransferMask {
        #[arg(long)]
        mask: PathBuf,
    },
    /// Histogram, per-layer and loss-curve data of a prune run.
    Report {
        /// Run directory; defaults to out_dir.
        run_dir: Option<PathBuf>,
    },
    /// Prune once per `grid.points` entry and tabulate hard accuracy.
    Grid,
}

fn key_table() -> String {
    let keys = config_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (TOML; dotted names work with --set):\n");
    for (key, default) in keys {
        let _ = writeln!(out, "  {key:width$}  {default}");
    }
    out
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let Some(path) = &cli.config else {
        bail!("no config given; pass --config <FILE>");
    };
    let mut cfg = RunConfig::load(path, &cli.overrides).with_context(|| format!("loading {}", path.display()))?;
    if cli.no_crispness {
        cfg.prune = cfg.prune.without_crispness();
    }
    if cli.no_logistic_round {
        cfg.prune = cfg.prune.without_logistic_round();
    }
    Ok(cfg)
}

fn print_json(value: &impl Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn latest_checkpoint(dir: &Path) -> anyhow::Result<PathBuf> {
    [pipeline::FINETUNE_CHECKPOINT, pipeline::PRUNE_CHECKPOINT, pipeline::TRANSFER_CHECKPOINT, pipeline::PRETRAIN_CHECKPOINT]
        .iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
        .with_context(|| format!("no checkpoint in {}; run `pretrain` first", dir.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Report { run_dir: Some(dir) } = &cli.command {
        return print_json(&pipeline::report(dir)?);
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Pretrain => print_json(&pipeline::pretrain(&cfg)?),
        Command::Prune { resume, stop_after } => print_json(&pipeline::prune(&cfg, PruneOptions { resume, stop_after })?),
        Command::Finetune { from } => print_json(&pipeline::finetune(&cfg, from.as_deref())?),
        Command::Evaluate { checkpoint, all_ones } => {
            let path = match checkpoint {
                Some(p) => p,
                None => latest_checkpoint(&cfg.out_dir)?,
            };
            print_json(&pipeline::evaluate_checkpoint(&cfg, &path, all_ones)?)
        }
        Command::ExportMask { checkpoint, out } => {
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.out_dir.join(pipeline::PRUNE_CHECKPOINT));
            let out = out.unwrap_or_else(|| cfg.out_dir.join(pipeline::MASK_FILE));
            let budgets = pipeline::export_selected_mask(&checkpoint, &out)?;
            print_json(&serde_json::json!({ "mask_file": out, "budgets": budgets }))
        }
        Command::TransferMask { mask } => print_json(&pipeline::transfer_mask_file(&cfg, &mask)?),
        Command::Report { .. } => print_json(&pipeline::report(&cfg.out_dir)?),
        Command::Grid => print_json(&pipeline::grid(&cfg)?),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(key_table()).after_help("Run with --help to list every config key.").get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("chipnet: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
