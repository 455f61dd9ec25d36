use clap::{Parser, Subcommand};
use mmkd_cli::commands;
use mmkd_cli::error::Result;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mmkd",
    version,
    about = "Multimodal teachers, unimodal students: train, distill, inspect"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData {
        /// JSON generator spec; omit for the built-in desk-scale default.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed; MODAL_DISTILL_SEED is the fallback.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the run described by a config document.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint.mmkc and history.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Teacher checkpoint; required whenever method is not "none".
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint over every sample in a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Load even if the checkpoint hashes do not verify.
        #[arg(long)]
        force: bool,
    },
    /// Write one sample's attention maps as a JSON document.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-component parameter counts for a run config.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Median forward latency of a checkpoint, optionally against a baseline.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 30)]
        repeats: usize,
        /// Second checkpoint timed in lockstep for a paired comparison.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
}

fn emit<T: serde::Serialize>(report: &T) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    // A closed pipe (`mmkd ... | head`) is the reader's choice, not an error.
    if let Err(e) = writeln!(std::io::stdout(), "{text}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: {e}");
        std::process::exit(4);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { spec, out, seed } => {
            emit(&commands::cmd_gen_data(spec.as_deref(), &out, seed)?)
        }
        Cmd::Train { config, out, teacher, seed } => {
            emit(&commands::cmd_train(&config, &out, teacher.as_deref(), seed)?)
        }
        Cmd::Eval { ckpt, data, force } => emit(&commands::cmd_eval(&ckpt, &data, force)?),
        Cmd::DumpAttn { ckpt, data, sample, out } => {
            emit(&commands::cmd_dump_attn(&ckpt, &data, sample, &out)?)
        }
        Cmd::Params { config } => emit(&commands::cmd_params(&config)?),
        Cmd::Bench { ckpt, data, repeats, baseline, batch } => {
            emit(&commands::cmd_bench(&ckpt, &data, repeats, baseline.as_deref(), batch)?)
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
