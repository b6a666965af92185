use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmcn::commands::{self, Variant};
use dmcn::config::RunConfig;
use dmcn::{Error, Result};

/// Deep memory connected network for single-image super-resolution.
#[derive(Parser, Debug)]
#[command(name = "dmcn", version)]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(2..=4))]
    scale: Option<u8>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a PNG directory 80/20 and cut the training images into patches.
    Prepare {
        /// Directory of PNG images (defaults to `data_dir`).
        input: Option<PathBuf>,
    },
    /// Train on prepared patches.
    Train {
        /// Directory written by `prepare` (defaults to `data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare a checkpoint with bicubic interpolation on test images.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG directory or a list file such as `test.txt` from `prepare`.
        test: PathBuf,
        /// Name shown in the report.
        #[arg(long, default_value = "test")]
        dataset: String,
    },
    /// Super-resolve one image.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        /// Output PNG (defaults to `<out>/<name>_x<scale>.png`).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Treat the input as the low-resolution image and enlarge it.
        #[arg(long)]
        assume_lr: bool,
    },
    /// Train architecture variants side by side.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// full, no_local, no_global, no_memory, no_hourglass
        #[arg(required = true, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Per-layer cost report.
    Flops {
        /// Square input size.
        #[arg(long, default_value_t = 48)]
        size: usize,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(Error::Usage)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string()).map_err(Error::Usage)?;
    }
    if let Some(scale) = cli.scale {
        cfg.scale = scale as usize;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = run_config(&cli)?;
    match cli.command {
        Command::Prepare { input } => {
            let input = match input {
                Some(p) => p,
                None => cfg.require_data_dir()?.to_path_buf(),
            };
            let summary = commands::prepare(&cfg, &input, cfg.require_out_dir()?)?;
            for (path, why) in &summary.skipped {
                log(&format!("skipped {}: {why}", path.display()));
            }
            print!("{}", summary.text(&cfg));
        }
        Command::Train { data, epochs, resume } => {
            apply_data(&mut cfg, data, epochs)?;
            let history = commands::train(&cfg, resume.as_deref(), &mut log)?;
            if let Some(last) = history.last() {
                println!("epoch {} loss {}", last.epoch + 1, last.loss);
            }
        }
        Command::Eval {
            checkpoint,
            test,
            dataset,
        } => {
            let out = cfg.require_out_dir()?;
            let outcome = commands::eval(&checkpoint, &test, cfg.scale, &dataset, out)?;
            print!("{}", outcome.table);
        }
        Command::Sr {
            checkpoint,
            input,
            output,
            assume_lr,
        } => {
            let output = match output {
                Some(p) => p,
                None => default_sr_output(&cfg, &input)?,
            };
            let (w, h) = commands::sr(&checkpoint, &input, &output, cfg.scale, assume_lr)?;
            println!("{} {w}x{h}", output.display());
        }
        Command::Ablate { data, epochs, variants } => {
            apply_data(&mut cfg, data, epochs)?;
            let variants: Vec<Variant> = variants.iter().map(|v| v.parse()).collect::<Result<_>>()?;
            let (_, text) = commands::ablate(&cfg, &variants, &mut log)?;
            print!("{text}");
        }
        Command::Flops { size } => print!("{}", commands::flops(&cfg, size)?),
    }
    Ok(())
}

fn apply_data(cfg: &mut RunConfig, data: Option<PathBuf>, epochs: Option<usize>) -> Result<()> {
    if let Some(d) = data {
        cfg.data_dir = Some(d);
    }
    if let Some(e) = epochs {
        cfg.set("epochs", &e.to_string()).map_err(Error::Usage)?;
    }
    Ok(())
}

fn default_sr_output(cfg: &RunConfig, input: &Path) -> Result<PathBuf> {
    let stem = input
        .file_stem()
        .ok_or_else(|| Error::Usage(format!("{} has no file name", input.display())))?;
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    Ok(dir.join(format!("{}_x{}.png", stem.to_string_lossy(), cfg.scale)))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
