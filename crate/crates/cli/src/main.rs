//! `ptcmil`: generate synthetic bags, train, evaluate, adapt, export
//! cluster maps and check gradients.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::parse_override;

#[derive(Debug, Parser)]
#[command(name = "ptcmil", version, about = "Prompt-token clustering MIL aggregator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration file of `key = value` lines
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable); wins over the file
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    set: Vec<(String, String)>,
    /// Seed; falls back to the config file, then to the PTCMIL_SEED environment variable
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset as train/val/test bag files plus split manifests
    GenData {
        /// classification or survival
        #[arg(long)]
        task: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on DATA/train.ptcb with validation on DATA/val.ptcb
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory holding train.ptcb, val.ptcb and optionally test.ptcb
        #[arg(long)]
        data: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a bag file
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bag file (.ptcb)
        #[arg(long)]
        data: PathBuf,
        /// Directory for eval_report.txt; report goes to stdout only when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Few-shot adaptation of the task head and merge scorer
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bag file the adaptation shots are drawn from
        #[arg(long)]
        data: PathBuf,
        /// Number of class-balanced bags [default: 20]
        #[arg(long)]
        shots: Option<usize>,
        /// Optional bag file for before/after validation
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-patch cluster assignments as CSV
    ExportClusters {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bag file (.ptcb)
        #[arg(long)]
        data: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every trainable scalar
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Double one analytic gradient entry to prove the check catches it
        #[arg(long)]
        inject_fault: bool,
        /// Directory for gradcheck_report.txt
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { task, cfg, out } => commands::gen_data(&cfg.overrides(task), cfg.config.as_deref(), &out),
        Command::Train { cfg, data, out } => commands::train(&cfg.overrides(None), cfg.config.as_deref(), &data, &out),
        Command::Eval { checkpoint, data, out } => commands::eval(&checkpoint, &data, out.as_deref()),
        Command::Adapt {
            cfg,
            checkpoint,
            data,
            shots,
            val,
            out,
        } => {
            let mut o = cfg.overrides(None);
            if let Some(k) = shots {
                o.push(("shots".into(), k.to_string()));
            }
            commands::adapt(&o, cfg.config.as_deref(), &checkpoint, &data, val.as_deref(), &out)
        }
        Command::ExportClusters { checkpoint, data, out } => commands::export_clusters(&checkpoint, &data, &out),
        Command::Gradcheck { cfg, inject_fault, out } => commands::gradcheck(
            &cfg.overrides(None),
            cfg.config.as_deref(),
            inject_fault,
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

impl ConfigArgs {
    fn overrides(&self, task: Option<String>) -> Vec<(String, String)> {
        let mut o = self.set.clone();
        if let Some(t) = task {
            o.push(("task".into(), t));
        }
        if let Some(s) = self.seed {
            o.push(("seed".into(), s.to_string()));
        }
        o
    }
}
