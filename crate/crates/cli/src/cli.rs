use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use voxseg::data::gen_synthetic;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, SynthFile};
use crate::error::CliError;
use crate::gradcheck::{self, GradcheckConfig};
use crate::{eval, train};

#[derive(Debug, Parser)]
#[command(name = "voxseg", version, about = "Volumetric segmentation with adaptive Tversky/BCE training")]
pub struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model; writes metrics.csv, checkpoints and summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split (train, val or test).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: String,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print a checkpoint's header.
    Info {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn synth(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<u8, CliError> {
    let mut file = SynthFile::load(config)?;
    if let Some(s) = seed {
        file.synth.seed = s;
    }
    let dir = out
        .map(Path::to_path_buf)
        .or(file.out)
        .ok_or_else(|| CliError::Config("`out` is required (in the file or via --out)".into()))?;
    let split = gen_synthetic(&file.synth, &dir)?;
    println!(
        "wrote {} volumes to {} (train {}, val {}, test {})",
        split.len(),
        dir.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(0)
}

fn info(ckpt: &Path) -> Result<u8, CliError> {
    let ck = Checkpoint::load(ckpt)?;
    let h = &ck.header;
    println!("checkpoint      {}", ckpt.display());
    println!("epoch           {}", h.epoch);
    println!("parameters      {} tensors, {} values", ck.params.len(), ck.params.num_scalars());
    println!("adam step       {}", h.adam_step);
    println!("lr              {}", h.lr_schedule.current_lr);
    println!("next weights    w_tversky {} w_bce {}", h.next_weights.w_tversky, h.next_weights.w_bce);
    match h.best_val_dsc {
        Some(d) => println!("best val dsc    {d}"),
        None => println!("best val dsc    -"),
    }
    println!("--- config ---\n{}", h.config.to_toml());
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<u8, CliError> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Synth { config } => synth(config, cli.seed, out),
        Command::Train { config, resume } => {
            let cfg = ExperimentConfig::load(config, cli.seed, out)?;
            train::train(&cfg, resume.as_deref(), true)?;
            Ok(0)
        }
        Command::Eval { ckpt, split } => {
            let report = eval::evaluate(ckpt, split, out)?;
            print!("{}", report.table());
            println!("wrote {}", report.csv_path.display());
            Ok(0)
        }
        Command::Gradcheck { config } => {
            let mut cfg = match config {
                Some(p) => GradcheckConfig::load(p)?,
                None => GradcheckConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let report = gradcheck::run(&cfg)?;
            print!("{}", report.render());
            Ok(report.exit_code())
        }
        Command::Info { ckpt } => info(ckpt),
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> u8 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
