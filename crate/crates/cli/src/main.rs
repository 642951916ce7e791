use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lvgan_cli::commands::{self, EvalArgs, SampleArgs, SampleMode, TrainArgs};
use lvgan_cli::serve::{self, Snapshot};
use lvgan_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "lvgan", version, about = "Self-trained controllable GAN with a learned ICA latent model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` assignments applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Overrides the config's `output`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from the output directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Perturbation sweep, Fréchet proxy and optional factor table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Perturbations per latent element.
        #[arg(long, default_value_t = 10)]
        perturbations: usize,
        #[arg(long, default_value_t = 1.0)]
        range: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generated samples for the Fréchet proxy.
        #[arg(long, default_value_t = 512)]
        samples: usize,
        /// Also correlate elements with the renderer's factors.
        #[arg(long)]
        factors: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an image grid: random codes, an interpolation or element sweeps.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "random")]
        mode: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Element for `element-sweep`; all elements when omitted.
        #[arg(long)]
        element: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "samples.ppm")]
        out: PathBuf,
    },
    /// Serve the HTTP API for one checkpoint.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, seed, sets, output, resume } => {
            let out = commands::cmd_train(&TrainArgs { config, seed, sets, output, resume })?;
            println!("run written to {}", out.display());
        }
        Command::Eval { checkpoint, perturbations, range, seed, samples, factors, out } => {
            let r = commands::cmd_eval(&EvalArgs { checkpoint, perturbations, range, seed, samples, factors, out })?;
            println!("pairs            {}", r.report.pairs);
            println!("mean MAE         {:.6}", r.report.mean_mae);
            println!("mean perceptual  {:.6}", r.report.mean_perceptual);
            println!("frechet proxy    {:.6}", r.fid);
            if let Some(t) = &r.factors {
                for (j, (f, v)) in t.best.iter().enumerate() {
                    println!("element {j}: factor {f} |r| = {v:.3}");
                }
            }
            println!("reports in {}", r.dir.display());
        }
        Command::Sample { checkpoint, mode, n, element, seed, out } => {
            let mode: SampleMode = mode.parse()?;
            let (img, codes) = commands::cmd_sample(&SampleArgs { checkpoint, mode, n, element, seed, out })?;
            println!("grid {} codes {}", img.display(), codes.display());
        }
        Command::Serve { checkpoint, port, host } => {
            let state = commands::load_state(&checkpoint)?;
            let addr: SocketAddr = format!("{host}:{port}").parse().map_err(|e| CliError::Usage(format!("address: {e}")))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve::serve(Snapshot::from_state(state), addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
