use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dexteleop::cli::{self, RunConfig};

#[derive(Parser)]
#[command(name = "dexteleop", version, about = "Simulated teleoperation data collection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive a calibration profile from a static pose and a motion clip.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        /// JSON-lines file; the first frame is used as the static open pose.
        #[arg(long)]
        static_frames: PathBuf,
        /// JSON-lines file covering at least one flexion cycle.
        #[arg(long)]
        motion_frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retarget a stream of human hand frames to robot joint angles.
    Retarget {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Input JSON-lines frames.
        #[arg(long)]
        input: PathBuf,
        /// Output JSON-lines of { t, theta, cost }.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run simulated collection episodes and write them to a dataset root.
    Simulate {
        #[arg(long)]
        env_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, default_value_t = 491)]
        steps: usize,
        /// Override the environment config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify manifests and aggregate sync metrics for a dataset root.
    Validate {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a ready-to-run environment config.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Directory holding the hand model JSON files.
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout();
    let result = match cli.command {
        Command::Calibrate {
            model,
            static_frames,
            motion_frames,
            out,
        } => cli::cmd_calibrate(&model, &static_frames, &motion_frames, &out, &mut stdout),
        Command::Retarget {
            model,
            profile,
            config,
            input,
            out,
        } => cli::cmd_retarget(&model, &profile, &config, &input, &out),
        Command::Simulate {
            env_config,
            out,
            episodes,
            steps,
            seed,
        } => cli::cmd_simulate(
            &RunConfig {
                env_config,
                out_root: out,
                episodes,
                steps,
                seed,
            },
            &mut stdout,
        )
        .map(|_| ()),
        Command::Validate { root, json } => {
            return match cli::cmd_validate(&root, json, &mut stdout) {
                Ok(report) if report.failures.is_empty() => ExitCode::SUCCESS,
                Ok(_) => ExitCode::from(1),
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(2)
                }
            };
        }
        Command::InitConfig { out, models, seed } => {
            cli::write_default_env_config(&out, &models, seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
