//! `atkl`: data generation, teacher pretraining, distillation, evaluation,
//! parameter counting and gradient checking.
//!
//! Exit codes: 0 success, 1 I/O or file-format failure, 2 usage or config
//! error, 3 numeric failure (NaN, divergence, failed gradient check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "atkl", version, about = "Attention-transfer + KL distillation for speech enhancement")]
struct Cli {
    /// Working directory; defaults to $ATKL_WORKDIR, then to the config's `paths.workdir`.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the default (desk-scale) config as TOML.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize clean/noisy WAV pairs and a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: the workdir's data directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the teacher on clean targets.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the student directly on clean targets, without a teacher.
    TrainBaseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the student against the pretrained teacher.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: commands::ModeArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Teacher checkpoint (default: `teacher.ckpt` in the checkpoint directory).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Per-clip SI-SNR of the noisy input and the enhanced output, as CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Which configured architecture the checkpoint holds.
        #[arg(long, value_enum, default_value_t = Arch::Student)]
        which: Arch,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Feed the clean signal as the model input (sanity check of the metric).
        #[arg(long)]
        clean_input: bool,
    },
    /// Exact trainable parameter count of a full-scale architecture.
    CountParams {
        #[arg(long, value_enum)]
        which: CountWhich,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Count the desk-scale training config instead of the full-scale one.
        #[arg(long)]
        desk: bool,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Arch {
    Student,
    Teacher,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CountWhich {
    Student,
    Teacher,
    Dccrn,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitArg {
    All,
    Train,
    Val,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
