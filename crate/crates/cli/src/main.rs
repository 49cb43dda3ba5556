use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynslam::pipeline::{evaluate, run_pipeline, synth_gen, PipelineError, RunConfig, RunOptions};

#[derive(Parser, Debug)]
#[command(name = "dynslam", version, about = "RGB-D SLAM with dynamic object tracking")]
struct Cli {
    /// Print per-frame progress lines.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Track a sequence and export maps, trajectories and metrics.
    Run {
        #[arg(long, value_name = "DIR")]
        sequence: PathBuf,
        #[arg(long, value_name = "FILE")]
        settings: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Skip the whole-sequence optimization.
        #[arg(long)]
        no_global: bool,
        /// Skip the windowed optimization.
        #[arg(long)]
        no_local: bool,
        /// Local window size in frames (overrides the settings file).
        #[arg(long, value_name = "W", value_parser = clap::value_parser!(u64).range(2..))]
        window: Option<u64>,
        /// Motion smoothness weight for the global graph.
        #[arg(long, value_name = "WEIGHT")]
        smoothness: Option<f64>,
        /// RANSAC seed (overrides the settings file).
        #[arg(long, value_name = "S")]
        seed: Option<u64>,
    },
    /// Score exported trajectories against ground truth.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        est: PathBuf,
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Rigidly align the camera trajectory before scoring.
        #[arg(long)]
        align: bool,
    },
    /// Generate a synthetic sequence from a scene spec file.
    SynthGen {
        #[arg(long, value_name = "FILE")]
        spec: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Run {
            sequence,
            settings,
            out,
            no_global,
            no_local,
            window,
            smoothness,
            seed,
        } => {
            let config = RunConfig {
                sequence,
                settings,
                out,
                options: RunOptions {
                    local_window: !no_local,
                    window: window.map(|w| w as usize),
                    global: !no_global,
                    smoothness_weight: smoothness,
                    seed,
                },
            };
            let output = run_pipeline(&config, |line| {
                if verbose {
                    eprintln!("pipeline: {line}");
                }
            })?;
            let mut stdout = std::io::stdout().lock();
            if let Some(m) = &output.metrics {
                let _ = write!(stdout, "{}", m.summary());
            }
            let _ = writeln!(
                stdout,
                "{} frames, {} map points, outputs in {}",
                output.states.len(),
                output.map.len(),
                config.out.display()
            );
        }
        Command::Evaluate { est, gt, out, align } => {
            let reports = evaluate(&est, &gt, &out, align)?;
            let mut stdout = std::io::stdout().lock();
            for r in &reports {
                let _ = write!(stdout, "{}", r.summary());
            }
        }
        Command::SynthGen { spec, out } => {
            synth_gen(&spec, &out)?;
            if verbose {
                eprintln!("synth: wrote {}", out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format(|buf, record| writeln!(buf, "{}", record.args()))
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
