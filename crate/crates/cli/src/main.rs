use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pialab_cli::config::PRESETS;
use pialab_cli::{commands, threads_from_env, CliError, ExperimentConfig};
use pialab_core::scores::format_time;

/// Membership inference against diffusion models on synthetic data.
///
/// Every option is a config key: `--set training.epochs=500` overrides the
/// file, which overrides the preset. Options go before the subcommand.
#[derive(Parser)]
#[command(name = "pialab", version)]
struct Cli {
    /// Base preset.
    #[arg(long, value_parser = PRESETS)]
    preset: Option<String>,

    /// TOML config file layered over the preset.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// `key=value` override, e.g. `attacks.0.p=2.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and member/holdout split.
    Gen,
    /// Train the noise predictor on the members.
    Train,
    /// Score members and holdouts with every configured attack.
    Attack,
    /// Compute AUC, TPR at low FPR and ROC curves from the scores.
    Eval,
    /// Evaluate a grid of attack times and norm orders.
    Sweep,
    /// Summarize the run directory as Markdown.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = threads_from_env()? {
        pialab_core::parallel::configure_threads(n);
    }
    let mut overrides = cli.overrides;
    if let Some(dir) = cli.out_dir {
        let dir = toml::Value::String(dir.display().to_string());
        overrides.push(format!("out_dir={dir}"));
    }
    let cfg = ExperimentConfig::load(cli.preset.as_deref(), cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Gen => {
            let s = commands::cmd_gen(&cfg)?;
            println!(
                "generated {} samples: {} members, {} holdouts in {}",
                s.n_samples,
                s.n_members,
                s.n_holdout,
                cfg.out_dir.display()
            );
        }
        Command::Train => {
            let s = commands::cmd_train(&cfg)?;
            match (s.trace.first(), s.trace.epoch_losses.last()) {
                (Some(first), Some(last)) => println!(
                    "trained epochs {}..{} in {:.1} s, loss {first:.4} -> {last:.4}",
                    s.start_epoch, s.epochs_trained, s.wall_time_seconds
                ),
                _ => println!("checkpoint at epoch {}, nothing to train", s.epochs_trained),
            }
        }
        Command::Attack => {
            let scores = commands::cmd_attack(&cfg)?;
            for group in commands::group_scores(&scores) {
                let q: u64 = group.iter().map(|s| s.queries).sum();
                println!(
                    "{} t={} p={}: {} samples, {q} queries",
                    group[0].method,
                    format_time(group[0].t),
                    group[0].p,
                    group.len()
                );
            }
        }
        Command::Eval => {
            for r in commands::cmd_eval(&cfg)? {
                println!(
                    "{} t={} p={}: AUC {:.4}, TPR@1%FPR {:.4}, TPR@0.1%FPR {:.4}",
                    r.method, r.t, r.p, r.auc, r.tpr_at_1pct_fpr, r.tpr_at_01pct_fpr
                );
            }
        }
        Command::Sweep => {
            let rows = commands::cmd_sweep(&cfg)?;
            println!("{} grid points in {}", rows.len(), commands::RunPaths::new(&cfg).sweep().display());
        }
        Command::Report => {
            println!("{}", commands::cmd_report(&cfg)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
