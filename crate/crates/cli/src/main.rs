use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use polyseg_cli::{commands, RunConfig};

/// Polyp segmentation with uncertainty and saliency maps.
///
/// Settings come from built-in defaults, then --config, then --set, then
/// --seed and --out; later sources win.
#[derive(Parser)]
#[command(name = "polyseg", version)]
struct Cli {
    /// key = value config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for matrix products.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset under data.root.
    Synth,
    /// Train on data.root, writing checkpoints and a log to output.dir.
    Train {
        /// Continue from last.ckpt and best.ckpt in output.dir.
        #[arg(long)]
        resume: bool,
    },
    /// Print metrics of a checkpoint on one split as JSON.
    Eval {
        /// Defaults to output.dir/best.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write <stem>.pred.png masks.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write <stem>.unc.png Monte Carlo dropout standard-deviation maps.
    Uncertainty {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the raw map as <stem>.unc.bin.
        #[arg(long)]
        dump: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write <stem>.sal.png guided-backpropagation maps.
    Saliency {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides saliency.target.
        #[arg(long)]
        target: Option<String>,
        /// Also write the raw gradient as <stem>.sal.bin.
        #[arg(long)]
        dump: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

fn configure(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Command::Saliency { target: Some(t), .. } = &cli.command {
        cfg.set("saliency.target", t)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        // Read by the matrix-product kernels on first use.
        std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    }
    let cfg = configure(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let print_paths = |paths: Vec<PathBuf>| paths.iter().for_each(|p| println!("{}", p.display()));
    match &cli.command {
        Command::Synth => println!("{}", commands::synth(&cfg)?.display()),
        Command::Train { resume } => {
            let out = commands::train(&cfg, *resume)?;
            let summary = serde_json::json!({
                "best_val_iou": out.best.train_state["best_metric"].item(),
                "best_epoch": out.best.train_state["epoch"].item(),
                "epochs": out.last.train_state["epoch"].item(),
                "stopped_early": out.stopped_early,
                "checkpoint": cfg.output_dir.join(polyseg::train::BEST_CHECKPOINT),
            });
            println!("{summary}");
        }
        Command::Eval { checkpoint, split } => {
            println!("{}", commands::eval(&cfg, checkpoint.as_deref(), split)?.to_json());
        }
        Command::Predict { checkpoint, images } => print_paths(commands::predict(&cfg, checkpoint.as_deref(), images)?),
        Command::Uncertainty { checkpoint, dump, images } => {
            print_paths(commands::uncertainty(&cfg, checkpoint.as_deref(), images, *dump)?)
        }
        Command::Saliency { checkpoint, dump, images, .. } => {
            print_paths(commands::saliency(&cfg, checkpoint.as_deref(), images, *dump)?)
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
