use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use docscale::config::{Overrides, RunConfig};
use docscale::{pipeline, Error};

/// Dual-modality document classification: data generation, training,
/// ensemble evaluation and data-parallel scaling benchmarks.
#[derive(Parser, Debug)]
#[command(name = "docscale", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config layered over the built-in desk profile; repeatable.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Data-parallel worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    batch_per_worker: Option<usize>,
    /// Fixed-order gradient reduction.
    #[arg(long, global = true)]
    deterministic: Option<bool>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and split plans.
    GenData,
    /// Train the image network from scratch.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a pre-trained image checkpoint.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split_id: Option<usize>,
    },
    /// Train the text encoder.
    TrainText {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split_id: Option<usize>,
    },
    /// Evaluate image, text and fused predictions on every split.
    EnsembleEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image_checkpoint: PathBuf,
        #[arg(long)]
        text_checkpoint: PathBuf,
        #[arg(long)]
        split_id: Option<usize>,
    },
    /// Measure speedup over worker counts.
    BenchScaling {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
    },
}

fn run(cli: Cli) -> docscale::Result<()> {
    let mut cfg = RunConfig::load(&cli.common.config)?;
    cfg.apply(&Overrides {
        seed: cli.common.seed,
        workers: cli.common.workers,
        batch_per_worker: cli.common.batch_per_worker,
        deterministic: cli.common.deterministic,
        out: cli.common.out.clone(),
    })?;
    match &cli.command {
        Command::Finetune { split_id: Some(s), .. }
        | Command::TrainText { split_id: Some(s), .. }
        | Command::EnsembleEval { split_id: Some(s), .. } => cfg.split_id = *s,
        Command::BenchScaling { k_list: Some(k), .. } => cfg.bench.k_list = k.clone(),
        _ => {}
    }
    cfg.validate()?;
    if cli.common.print_config {
        let _ = write!(std::io::stdout(), "{}", cfg.to_toml()?);
        return Ok(());
    }
    let manifest = match &cli.command {
        Command::GenData => pipeline::gen_data(&cfg)?,
        Command::Pretrain { data } => pipeline::pretrain(&cfg, data)?,
        Command::Finetune { data, checkpoint, .. } => pipeline::finetune(&cfg, data, checkpoint)?,
        Command::TrainText { data, .. } => pipeline::train_text(&cfg, data)?,
        Command::EnsembleEval { data, image_checkpoint, text_checkpoint, .. } => {
            pipeline::ensemble_eval(&cfg, data, image_checkpoint, text_checkpoint)?
        }
        Command::BenchScaling { data, .. } => pipeline::bench_scaling(&cfg, data.as_deref())?,
    };
    let mut out = std::io::stdout().lock();
    for (k, v) in &manifest.metrics {
        let _ = writeln!(out, "{k} = {v}");
    }
    let _ = writeln!(out, "artifacts in {}", cfg.out.display());
    Ok(())
}

fn report(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}]: {msg}", e.code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", report(&e));
            ExitCode::FAILURE
        }
    }
}
