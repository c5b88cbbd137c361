//! Command-line front end for the stereo geometry pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use esgn::cli;
use esgn::eval::RecallPoints;

#[derive(Parser)]
#[command(
    name = "esgn",
    about = "Deterministic stereo 3D detection geometry pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run stereo inference over KITTI-layout frames and write detections.
    Pipeline {
        /// Path to a key = value config file.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated frame ids; defaults to every labelled frame.
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<String>>,
        /// Comma-separated intermediate tensor names to save as .esgt.
        #[arg(long, value_delimiter = ',', default_value = "")]
        dump: Vec<String>,
        /// Worker threads; 0 picks the rayon default.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Compare student geometry features against the LiDAR teacher.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Evaluate detection files against ground truth (KITTI AP protocol).
    Eval {
        /// Directory of ground-truth label files.
        #[arg(long)]
        gt: PathBuf,
        /// Directory of detection files (label rows with scores).
        #[arg(long)]
        dets: PathBuf,
        #[arg(long, default_value = "Car")]
        class: String,
        /// 3D / BEV overlap threshold for a true positive.
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        /// Recall interpolation grid: 11 or 40 points.
        #[arg(long = "recall-points", default_value_t = 40)]
        recall_points: u32,
    },
    /// Render one frame: PPM wireframe overlay and a PLY point scene.
    Viz {
        #[arg(long)]
        config: PathBuf,
        /// Frame id to render.
        #[arg(long)]
        frame: String,
    },
    /// Write a synthetic KITTI-layout dataset for the other subcommands.
    Gen {
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        /// Number of frames to write.
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// Scene seed; frame i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run built-in consistency checks; needs no data on disk.
    Selftest,
}

fn run(cli: Cli) -> esgn::Result<i32> {
    match cli.command {
        Command::Pipeline {
            config,
            frames,
            dump,
            threads,
        } => {
            let dumps: Vec<String> = dump.into_iter().filter(|d| !d.is_empty()).collect();
            cli::cmd_pipeline(&config, frames.as_deref(), &dumps, threads)
        }
        Command::Distill {
            config,
            frames,
            threads,
        } => cli::cmd_distill(&config, frames.as_deref(), threads),
        Command::Eval {
            gt,
            dets,
            class,
            iou,
            recall_points,
        } => {
            let recall = match recall_points {
                11 => RecallPoints::R11,
                40 => RecallPoints::R40,
                other => {
                    return Err(esgn::Error::Config(format!(
                        "recall-points must be 11 or 40, got {other}"
                    )))
                }
            };
            cli::cmd_eval(&gt, &dets, &class, iou, recall)
        }
        Command::Viz { config, frame } => cli::cmd_viz(&config, &frame),
        Command::Gen { out, frames, seed } => cli::cmd_gen(&out, frames, seed),
        Command::Selftest => cli::cmd_selftest(),
    }
}

/// Dying quietly on a closed pipe (`esgn eval | head`) beats the default
/// panic from println.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    let cli = Cli::parse();
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code.clamp(0, 255) as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
