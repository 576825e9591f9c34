use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use hdrlift_cli::ablate::cmd_ablate;
use hdrlift_cli::commands::{cmd_eval, cmd_infer, cmd_synth_data, cmd_train, InferArgs, SynthArgs};
use hdrlift_cli::{exit, RunConfig};
use hdrlift_core::data::ExposureParams;

#[derive(Parser)]
#[command(name = "hdrlift", version, about = "LDR to HDR reconstruction with a conditioned latent diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> hdrlift_core::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and a JSONL loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct an HDR image from one LDR PNG.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// RGBE output path.
        #[arg(long)]
        output: PathBuf,
        /// Display PNG path; defaults to the output with a `.png` extension.
        #[arg(long)]
        display: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint on a manifest; writes CSV and JSON reports.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Run the component ladder and the loss ablation.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build LDR/HDR pairs and a manifest from a directory of HDR files.
    SynthData {
        #[arg(long)]
        hdr_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated `alpha:beta` exposure settings.
        #[arg(long, value_delimiter = ',')]
        exposures: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.18)]
        key: f64,
        #[arg(long, default_value_t = 2.2)]
        gamma: f64,
        /// Generate this many procedural HDR scenes into the HDR directory first.
        #[arg(long, default_value_t = 0)]
        generate: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { cfg, run_dir, resume } => {
            let cfg = cfg.load()?;
            let s = cmd_train(&cfg, &run_dir, resume.as_deref()).context("training failed")?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Infer { checkpoint, input, output, display, steps, seed } => {
            let args = InferArgs {
                checkpoint: &checkpoint,
                input: &input,
                output: &output,
                display: display.as_deref(),
                steps,
                seed,
            };
            let (hdr, png) = cmd_infer(&args).context("inference failed")?;
            println!("{}\n{}", hdr.display(), png.display());
        }
        Command::Eval { cfg, checkpoint, manifest, run_dir } => {
            let cfg = cfg.load()?;
            let r = cmd_eval(&cfg, &checkpoint, &manifest, &run_dir).context("evaluation failed")?;
            println!(
                "evaluated {} failed {} psnr {:.3} ssim {:.4}",
                r.evaluated, r.failed, r.aggregates.psnr_db.mean, r.aggregates.ssim.mean
            );
        }
        Command::Ablate { cfg, out_dir } => {
            let cfg = cfg.load()?;
            let t = cmd_ablate(&cfg, &out_dir).context("ablation failed")?;
            print!("{}", t.to_markdown());
        }
        Command::SynthData { hdr_dir, out_dir, exposures, seed, key, gamma, generate, resolution } => {
            let exposures = exposures.iter().map(|s| ExposureParams::parse(s)).collect::<Result<Vec<_>, _>>()?;
            let args = SynthArgs {
                hdr_dir: &hdr_dir,
                out_dir: &out_dir,
                exposures,
                seed,
                key,
                gamma,
                generate,
                resolution,
            };
            println!("{}", cmd_synth_data(&args)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_of(&e))
        }
    }
}
