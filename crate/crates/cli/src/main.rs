use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stride_cli::{
    cmd_eval, cmd_explain, cmd_pretrain_cell, cmd_synth, cmd_train_align, cmd_train_frozen_head, cmd_train_swift, CliError,
    Context, RunConfig,
};
use stride_core::eval::render_table;
use stride_core::Split;

#[derive(Parser)]
#[command(name = "stride", version, about = "Weakly supervised slide screening on synthetic cytology")]
struct Cli {
    /// TOML run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = "STRIDE_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key, e.g. `--set swift.iterations=100`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Supervised cell-classifier warm start on the labelled cells.
    PretrainCell,
    /// Frozen-feature baseline: slide head on the pretrained encoder.
    TrainFrozenHead,
    /// Joint cell/slide training.
    TrainSwift {
        /// Follow with colour-adversarial fine-tuning.
        #[arg(long)]
        coloradv: bool,
    },
    /// Fit the description aligner on a trained checkpoint.
    TrainAlign {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Slide-level metrics on one split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Top cells of one slide with predicted descriptions.
    Explain {
        #[arg(long)]
        wsi: String,
        #[arg(long, default_value_t = 32)]
        topk: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides;
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let ctx = Context::new(config, cli.out);
    match cli.command {
        Command::Synth => println!("{}", cmd_synth(&ctx)?.display()),
        Command::PretrainCell => println!("{}", cmd_pretrain_cell(&ctx)?.display()),
        Command::TrainFrozenHead => println!("{}", cmd_train_frozen_head(&ctx)?.display()),
        Command::TrainSwift { coloradv } => println!("{}", cmd_train_swift(&ctx, coloradv)?.display()),
        Command::TrainAlign { checkpoint } => println!("{}", cmd_train_align(&ctx, checkpoint.as_deref())?.display()),
        Command::Eval { checkpoint, split } => {
            let (dir, report) = cmd_eval(&ctx, checkpoint.as_deref(), split)?;
            print!("{}", render_table(&report));
            println!("\nwritten to {}", dir.display());
        }
        Command::Explain { wsi, topk, checkpoint } => println!("{}", cmd_explain(&ctx, checkpoint.as_deref(), &wsi, topk)?.0.display()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
