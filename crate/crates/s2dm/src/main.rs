use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use s2dm::commands::{self, SampleRequest, T2vRequest, DEFAULT_SEEDS};
use s2dm::{CliResult, ExperimentConfig};
use s2dm_core::sector::NoiseMode;

#[derive(Parser)]
#[command(
    name = "s2dm",
    version,
    about = "Shared-noise video diffusion on synthetic clips"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Shared,
    Nonshared,
}

impl From<Mode> for NoiseMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Shared => NoiseMode::Shared,
            Mode::Nonshared => NoiseMode::PerFrame,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the frame model and, with --with-flow, the flow-sequence model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "shared")]
        mode: Mode,
        #[arg(long)]
        with_flow: bool,
    },
    /// Generate one clip translating at a constant velocity.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Must match the config the checkpoint was trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// Pixels per frame as `dx,dy`.
        #[arg(long, value_parser = parse_velocity, default_value = "0.5,0")]
        velocity: (f32, f32),
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        contact_sheet: bool,
    },
    /// Two-stage generation: reference frame, flow sequence, then the clip.
    T2v {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        flow_checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long)]
        reference_only: bool,
        #[arg(long)]
        contact_sheet: bool,
    },
    /// Train both noise modes (reusing checkpoints in --out) and compare the
    /// three training/sampling schedules.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained frame model against its untrained initialisation.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the canonical form and digest of a config.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_velocity(s: &str) -> Result<(f32, f32), String> {
    let (a, b) = s.split_once(',').ok_or("expected dx,dy")?;
    let parse = |t: &str| t.trim().parse::<f32>().map_err(|e| e.to_string());
    Ok((parse(a)?, parse(b)?))
}

fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn optional_config(path: Option<&Path>) -> CliResult<Option<ExperimentConfig>> {
    path.map(ExperimentConfig::load).transpose()
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            mode,
            with_flow,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let r = commands::train(&cfg, &out, mode.into(), with_flow)?;
            let last = |l: &[f64]| l.last().map_or("n/a".to_string(), |v| format!("{v:.6}"));
            println!("config {}", cfg.digest_hex());
            println!(
                "frame checkpoint {} final loss {}",
                r.frame.digest,
                last(&r.frame.losses)
            );
            if let Some(f) = r.flow {
                println!(
                    "flow checkpoint {} final loss {}",
                    f.digest,
                    last(&f.losses)
                );
            }
        }
        Command::Sample {
            checkpoint,
            config,
            seed,
            out,
            class,
            velocity,
            frames,
            contact_sheet,
        } => {
            let cfg = optional_config(config.as_deref())?;
            let req = SampleRequest {
                class,
                velocity,
                frames,
                seed,
                contact_sheet,
            };
            let r = commands::sample(&checkpoint, cfg.as_ref(), &req, &out)?;
            println!("wrote {} files to {}", r.files.len() + 1, out.display());
        }
        Command::T2v {
            checkpoint,
            flow_checkpoint,
            config,
            seed,
            out,
            class,
            reference_only,
            contact_sheet,
        } => {
            let cfg = optional_config(config.as_deref())?;
            let req = T2vRequest {
                class,
                seed,
                reference_only,
                contact_sheet,
            };
            let r = commands::t2v(
                &checkpoint,
                flow_checkpoint.as_deref(),
                cfg.as_ref(),
                &req,
                &out,
            )?;
            println!("wrote {} frames to {}", r.clip.len(), out.display());
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            commands::ablate(&cfg, &seeds, &out, &mut std::io::stderr())?;
            let text = std::fs::read_to_string(out.join("ablation.txt"))
                .map_err(|e| s2dm::CliError::io(&out, e))?;
            print!("{text}");
        }
        Command::Eval {
            checkpoint,
            config,
            seeds,
            out,
        } => {
            let cfg = optional_config(config.as_deref())?;
            let r = commands::eval(&checkpoint, cfg.as_ref(), &seeds, &out)?;
            for (label, m) in [("trained", r.trained), ("untrained", r.untrained)] {
                println!(
                    "{label:<9} fd {:.4} flow {:.4} consistency {:.5}",
                    m.toy_fd, m.flow_mse, m.consistency
                );
            }
        }
        Command::Config { config } => {
            let cfg = load_config(config.as_deref())?;
            print!("{}", cfg.canonical());
            println!("# digest {}", cfg.digest_hex());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error[{}]: {}",
                e.category(),
                e.to_string().replace('\n', " ")
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
