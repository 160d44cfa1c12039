use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cyltpv::commands;
use cyltpv::config::RunConfig;
use cyltpv::tensor::Dtype;
use cyltpv::Error;

#[derive(Parser)]
#[command(name = "cyltpv", version, about = "Cylindrical tri-perspective-view LiDAR segmentation and occupancy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to write (train) or read; defaults to `<output_dir>/model.tpvw`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Checkpoint storage and benchmark precision.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into `data_dir`.
    Gen,
    /// Train from a seeded initialization.
    Train,
    /// Point segmentation metrics.
    EvalSeg,
    /// Occupancy metrics and predicted grids.
    EvalOcc,
    /// Per-stage timing and memory accounting.
    Bench,
    /// End-to-end finite-difference gradient check.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::MemoryCap { .. } => 2,
        Error::Verification(_) => 4,
        Error::Shape(_)
        | Error::Data(_)
        | Error::Format { .. }
        | Error::Parse(_)
        | Error::Io { .. }
        | Error::NonFinite(_) => 3,
    }
}

fn print(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn run(cli: Cli) -> cyltpv::Result<()> {
    let path = cli.config.ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.precision {
        cfg.precision = match p {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        };
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    cfg.validate()?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let ckpt = cli.checkpoint.unwrap_or_else(|| commands::default_checkpoint(&cfg));
    match cli.command {
        Command::Gen => {
            let m = commands::cmd_gen(&cfg)?;
            eprintln!("wrote {} scenes to {}", m.scenes.len(), cfg.data_dir.display());
        }
        Command::Train => {
            let logs = commands::cmd_train(&cfg, &ckpt)?;
            if let (Some(a), Some(b)) = (logs.first(), logs.last()) {
                eprintln!("steps {}: loss {:.4} -> {:.4}", logs.len(), a.total, b.total);
            }
            eprintln!("wrote {}", ckpt.display());
        }
        Command::EvalSeg => print(&commands::cmd_eval_seg(&cfg, &ckpt)?),
        Command::EvalOcc => print(&commands::cmd_eval_occ(&cfg, &ckpt)?),
        Command::Bench => print(&commands::cmd_bench(&cfg, &ckpt)?),
        Command::Gradcheck => {
            let s = commands::cmd_gradcheck(&cfg)?;
            print(&s);
            s.check()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
