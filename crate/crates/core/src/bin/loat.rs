//! `loat`: train, sweep and analyse adversarially trained MLPs.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use loat_core::dataset::{read_dump, write_dump};
use loat_core::harness::analysis::{bounds_report, correlate, Regime};
use loat_core::harness::config::{load_config, RunConfig, SweepConfig};
use loat_core::harness::manifest::Manifest;
use loat_core::harness::plot::{plot_script, Figure};
use loat_core::harness::sweep::{history_rows, log_policy, run_sweep};
use loat_core::harness::table::{write_rows, Table};
use loat_core::mlp::{logits, WeightSet};
use loat_core::trainer::train_with;
use loat_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "loat",
    version,
    about = "Adversarial training, Fisher-Rao radius metrics and logit-oriented regularization for ReLU MLPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes history.csv, final.ckpt and manifest.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a width × λ × seed grid; writes sweep.csv and manifest.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Correlate Γce with the generalization gap in a sweep CSV.
    Correlate {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum)]
        regime: RegimeArg,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Radius estimates and complexity bounds for a logit dump.
    Bounds {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit a matplotlib script for one sweep figure.
    Plotscript {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum)]
        figure: FigureArg,
        /// Directory for `<figure>.py`; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump a checkpoint's logits on one split of a run config's data.
    DumpLogits {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Early,
    Late,
}

#[derive(Clone, Copy, ValueEnum)]
enum FigureArg {
    Fig2,
    Fig3,
    Fig4,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn emit_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let (mut cfg, base): (RunConfig, _) = load_config(config)?;
    cfg.data = cfg.data.resolved(&base);
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let data = cfg.data.load(&base)?;
    create_dir(out)?;
    let ckpt_dir = out.join("checkpoints");
    if cfg.train.checkpoint_every.is_some() {
        create_dir(&ckpt_dir)?;
    }
    let outcome = train_with(&cfg.train, &data, |trainer, log, record| {
        if let Some(r) = record {
            info!("epoch {}: train acc {:.4}, test acc {:.4}", log.epoch, r.clean_train_acc, r.clean_test_acc);
        }
        if trainer.checkpoint_due() {
            trainer.weights().save(&ckpt_dir.join(format!("epoch-{:05}.ckpt", log.epoch)))?;
        }
        Ok(())
    })?;
    write_rows(&out.join("history.csv"), &history_rows(&cfg.train, &outcome.history))?;
    outcome.weights.save(&out.join("final.ckpt"))?;
    let policy = format!("{:?}", cfg.train.eval);
    Manifest::new("train", &cfg, &data, policy)?.write(&out.join("manifest.json"))
}

/// Returns the number of failed cells.
fn cmd_sweep(config: &Path, out: &Path, seed: Option<u64>, jobs: usize) -> Result<usize> {
    let (mut cfg, base): (SweepConfig, _) = load_config(config)?;
    cfg.data = cfg.data.resolved(&base);
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    for w in cfg.dedup() {
        warn!("{w}");
        eprintln!("warning: {w}");
    }
    let data = cfg.data.load(&base)?;
    create_dir(out)?;
    let outcome = run_sweep(&cfg, &data, jobs)?;
    write_rows(&out.join("sweep.csv"), &outcome.rows)?;
    let mut manifest = Manifest::new("sweep", &cfg, &data, log_policy(&cfg))?;
    manifest.failures = outcome.failures;
    for f in &manifest.failures {
        eprintln!("cell {} failed: {}", f.run_id, f.error);
    }
    manifest.write(&out.join("manifest.json"))?;
    Ok(manifest.failures.len())
}

fn cmd_dump_logits(config: &Path, checkpoint: &Path, split: Split, out: &Path) -> Result<()> {
    let (cfg, base): (RunConfig, _) = load_config(config)?;
    let data = cfg.data.load(&base)?;
    let w = WeightSet::load(checkpoint)?;
    let batch = if split == Split::Train { &data.train } else { &data.test };
    write_dump(out, &logits(&w, batch.inputs())?, batch.labels(), batch.classes())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed)?,
        Command::Sweep { config, out, seed, jobs } => {
            let failed = cmd_sweep(&config, &out, seed, jobs)?;
            if failed > 0 {
                eprintln!("error: {failed} sweep cell(s) failed; see manifest.json");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Correlate { csv, regime, out } => {
            let regime = match regime {
                RegimeArg::Early => Regime::Early,
                RegimeArg::Late => Regime::Late,
            };
            emit_json(&correlate(&Table::read(&csv)?, regime)?, out.as_deref())?;
        }
        Command::Bounds { dump, out } => emit_json(&bounds_report(&read_dump(&dump)?)?, out.as_deref())?,
        Command::Plotscript { csv, figure, out } => {
            let figure = match figure {
                FigureArg::Fig2 => Figure::Fig2,
                FigureArg::Fig3 => Figure::Fig3,
                FigureArg::Fig4 => Figure::Fig4,
            };
            let script = plot_script(&Table::read(&csv)?, figure)?;
            match out {
                Some(dir) => {
                    create_dir(&dir)?;
                    write_text(&dir.join(format!("{figure}.py")), &script)?;
                }
                None => print!("{script}"),
            }
        }
        Command::DumpLogits { config, checkpoint, split, out } => cmd_dump_logits(&config, &checkpoint, split, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
