//! `kdmos`: projection, training, evaluation and verification of BEV
//! moving-object segmentation with class-weighted distillation.
//!
//! Exit codes: 0 success, 1 configuration / usage / I/O, 2 malformed input
//! data, 3 numeric failure.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kdmos_core::config::RunConfig;
use kdmos_core::verify::SUITES;

use failure::{io_failure, Failure, Result};

#[derive(Parser, Debug)]
#[command(name = "kdmos", version, about = "BEV moving-object segmentation with weighted class distillation")]
struct Cli {
    /// key=value config file; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, default_value_t = 0, global = true)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Print the effective configuration with every key documented.
    Config,
    /// Write a synthetic sequence in SemanticKITTI layout.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Project a sequence into motion tensors and cell labels.
    Project {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write one PGM image per motion channel under `out/render`.
        #[arg(long)]
        render: bool,
    },
    /// Train a network and write its checkpoint.
    Train {
        #[arg(long)]
        seq: PathBuf,
        /// none | logits:DIR | synth | synth:KAPPA,SIGMA
        #[arg(long, default_value = "none")]
        teacher: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Also write the per-epoch log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or the labels themselves) on a sequence.
    Eval {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
        ckpt: Option<PathBuf>,
        /// Score the ground-truth cell labels instead of a network.
        #[arg(long)]
        oracle: bool,
        /// Metrics file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run numerical verification suites.
    Verify {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(SUITES), default_value = "all")]
        suite: String,
    },
    /// Time projection and inference per frame.
    Bench {
        /// Sequence to time; a synthetic one is generated when absent.
        #[arg(long)]
        seq: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Overrides bench.frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Overrides bench.points.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-frame logits of a checkpoint for use as a teacher.
    ExportLogits {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| io_failure(path.display(), e))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|m| Failure::Config(format!("--set {o}: {m}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::Config(format!("thread pool: {e}")))?;
    let mut cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Train { epochs: Some(n), .. } => cfg.train.epochs = *n,
        Cmd::Bench { frames, points, .. } => {
            if let Some(f) = frames {
                cfg.bench.frames = *f;
            }
            if let Some(p) = points {
                cfg.bench.points = *p;
            }
        }
        _ => {}
    }
    cfg.validate().map_err(Failure::Config)?;

    match &cli.cmd {
        Cmd::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
        Cmd::SynthGen { out } => commands::synth_gen(&cfg, out),
        Cmd::Project { seq, out, render } => commands::project(&cfg, seq, out, *render),
        Cmd::Train {
            seq, teacher, out, log, ..
        } => commands::cmd_train(&cfg, seq, teacher, out, log.as_deref()),
        Cmd::Eval { seq, ckpt, out, .. } => commands::eval(&cfg, seq, ckpt.as_deref(), out.as_deref()),
        Cmd::Verify { suite } => commands::verify(suite),
        Cmd::Bench { seq, ckpt, out, .. } => {
            let text = commands::bench(&cfg, seq.as_deref(), ckpt.as_deref(), out.as_deref())?;
            print!("{text}");
            Ok(())
        }
        Cmd::ExportLogits { ckpt, seq, out } => commands::export_logits(&cfg, ckpt, seq, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
